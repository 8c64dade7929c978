//! Numerical solvers for backward SDEs driven by G-Brownian motion.
//!
//! * [`model`]: the volatility band, `G`, grids, payoffs and generators.
//! * [`pde`]: the explicit monotone scheme for the fully nonlinear G-heat equation.
//! * [`expectation`]: lattice G-expectations and their Monte Carlo dual bounds.
//! * [`bsde`]: the solution triple `(Y, Z, K)` along simulated paths.
//! * [`verify`]: numerical checks of the structural estimates.
//! * [`cli`]: configuration, the payoff expression language and the command line.

pub mod error;
pub mod model;
pub mod pde;
pub mod expectation;
pub mod bsde;
pub mod verify;
pub mod cli;

pub use error::{Error, Result};
