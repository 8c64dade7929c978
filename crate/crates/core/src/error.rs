use thiserror::Error;

/// Errors raised by the solvers and verifiers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Domain(String),

    #[error("CFL condition violated: sigma_hi^2 * dt / dx^2 = {ratio:.6} > 0.5")]
    Cfl { ratio: f64 },

    #[error("non-finite value at time node {k} (t = {t}), space node {j} (x = {x})")]
    NonFinite { k: usize, j: usize, t: f64, x: f64 },

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("control mismatch: {0}")]
    ControlMismatch(String),

    #[error("empty candidate set")]
    EmptyCandidates,
}

pub type Result<T> = std::result::Result<T, Error>;
