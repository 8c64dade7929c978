//! Explicit monotone scheme for the terminal-value problem
//!
//! ```text
//! ∂ₜu + G(∂²ₓₓu + 2g(t, u, ∂ₓu)) + f(t, u, ∂ₓu) = 0,   u(T, ·) = φ
//! ```
//!
//! stepped backward from `T` with central differences in space and the
//! nonlinearity applied pointwise to the discrete second difference. Boundary
//! nodes use a zero second difference and one-sided first differences. Under
//! `σ̄²Δt/Δx² ≤ ½` the `f = g = 0` update is a supremum of probability
//! kernels, hence monotone and sublinear.

use crate::error::{Error, Result};
use crate::model::{Generator, Grids, Payoff, SpaceGrid, TimeGrid, VolatilityBand};

/// Pointwise driver of the scheme, evaluated at the already known time level.
pub trait Driver: Sync {
    /// Coefficient of `dt`.
    fn f(&self, k: usize, t: f64, j: usize, x: f64, y: f64, z: f64) -> f64;

    /// Coefficient of `d⟨B⟩`; folded into the argument of `G` as `2g`.
    fn g(&self, _k: usize, _t: f64, _j: usize, _x: f64, _y: f64, _z: f64) -> f64 {
        0.0
    }

    fn has_f(&self) -> bool {
        true
    }

    fn has_g(&self) -> bool {
        false
    }
}

impl Driver for Generator {
    #[inline]
    fn f(&self, _k: usize, t: f64, _j: usize, _x: f64, y: f64, z: f64) -> f64 {
        Generator::f(self, t, y, z)
    }

    #[inline]
    fn g(&self, _k: usize, t: f64, _j: usize, _x: f64, y: f64, z: f64) -> f64 {
        Generator::g(self, t, y, z)
    }

    fn has_f(&self) -> bool {
        Generator::has_f(self)
    }

    fn has_g(&self) -> bool {
        Generator::has_g(self)
    }
}

/// The driver `f = g = 0`.
pub struct NoDriver;

impl Driver for NoDriver {
    fn f(&self, _: usize, _: f64, _: usize, _: f64, _: f64, _: f64) -> f64 {
        0.0
    }

    fn has_f(&self) -> bool {
        false
    }
}

/// A grid function `u(t_k, x_j)` on `[t0, t0 + horizon] × [lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    grids: Grids,
    t0: f64,
    values: Vec<f64>,
}

impl ValueSurface {
    pub fn from_values(grids: Grids, t0: f64, values: Vec<f64>) -> Result<Self> {
        let expected = (grids.nt() + 1) * grids.nx();
        if values.len() != expected {
            return Err(Error::GridMismatch(format!("expected {expected} values, got {}", values.len())));
        }
        Ok(Self { grids, t0, values })
    }

    pub fn grids(&self) -> &Grids {
        &self.grids
    }

    pub fn space(&self) -> &SpaceGrid {
        &self.grids.space
    }

    pub fn time(&self) -> &TimeGrid {
        &self.grids.time
    }

    /// Absolute time of the first node.
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == 0 {
            self.t0
        } else {
            self.t0 + self.grids.time.t(k)
        }
    }

    pub fn nt(&self) -> usize {
        self.grids.nt()
    }

    pub fn nx(&self) -> usize {
        self.grids.nx()
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        let nx = self.nx();
        &self.values[k * nx..(k + 1) * nx]
    }

    #[inline]
    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.nx() + j]
    }

    /// Linear interpolation in `x` on time row `k`, clamped to the domain.
    #[inline]
    pub fn at(&self, k: usize, x: f64) -> f64 {
        self.grids.space.interpolate(self.row(k), x)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn map_rows(&self, f: impl Fn(&[f64], &mut [f64], f64)) -> Self {
        let nx = self.nx();
        let dx = self.grids.space.dx();
        let mut out = vec![0.0; self.values.len()];
        for (src, dst) in self.values.chunks_exact(nx).zip(out.chunks_exact_mut(nx)) {
            f(src, dst, dx);
        }
        Self { grids: self.grids, t0: self.t0, values: out }
    }
}

/// `(∂ₓu, ∂²ₓₓu)` at node `j` of one row: central differences inside,
/// one-sided first and zero second differences at the boundary nodes.
#[inline]
pub fn row_derivatives(u: &[f64], dx: f64, j: usize) -> (f64, f64) {
    let n = u.len();
    if j == 0 {
        ((u[1] - u[0]) / dx, 0.0)
    } else if j == n - 1 {
        ((u[n - 1] - u[n - 2]) / dx, 0.0)
    } else {
        ((u[j + 1] - u[j - 1]) / (2.0 * dx), (u[j + 1] - 2.0 * u[j] + u[j - 1]) * (1.0 / (dx * dx)))
    }
}

/// Central first differences inside, one-sided at the two boundary nodes.
pub fn first_derivative(surface: &ValueSurface) -> ValueSurface {
    surface.map_rows(|u, out, dx| {
        for (j, o) in out.iter_mut().enumerate() {
            *o = row_derivatives(u, dx, j).0;
        }
    })
}

/// Central second differences inside, zero at the boundary nodes.
pub fn second_derivative(surface: &ValueSurface) -> ValueSurface {
    surface.map_rows(|u, out, dx| {
        for (j, o) in out.iter_mut().enumerate() {
            *o = row_derivatives(u, dx, j).1;
        }
    })
}

/// One backward step from the level at `t_next` (index `k_next` of the
/// surface's own grid) into `out`.
#[allow(clippy::too_many_arguments)]
fn step<D: Driver + ?Sized>(
    prev: &[f64],
    out: &mut [f64],
    k_next: usize,
    t_next: f64,
    dt: f64,
    space: &SpaceGrid,
    band: &VolatilityBand,
    driver: &D,
) -> std::result::Result<(), usize> {
    let n = prev.len();
    let dx = space.dx();
    let inv_dx2 = 1.0 / (dx * dx);
    let inv_2dx = 1.0 / (2.0 * dx);
    let has_f = driver.has_f();
    let has_g = driver.has_g();

    let update = |j: usize, d2: f64, d1: f64| -> f64 {
        let y = prev[j];
        let (f, g) = if has_f || has_g {
            let x = space.x(j);
            let f = if has_f { driver.f(k_next, t_next, j, x, y, d1) } else { 0.0 };
            let g = if has_g { driver.g(k_next, t_next, j, x, y, d1) } else { 0.0 };
            (f, g)
        } else {
            (0.0, 0.0)
        };
        y + dt * (band.g(d2 + 2.0 * g) + f)
    };

    out[0] = update(0, 0.0, (prev[1] - prev[0]) / dx);
    for j in 1..n - 1 {
        let d2 = (prev[j + 1] - 2.0 * prev[j] + prev[j - 1]) * inv_dx2;
        let d1 = (prev[j + 1] - prev[j - 1]) * inv_2dx;
        out[j] = update(j, d2, d1);
    }
    out[n - 1] = update(n - 1, 0.0, (prev[n - 1] - prev[n - 2]) / dx);

    match out.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(j),
        None => Ok(()),
    }
}

/// Runs the scheme over `[t0, t0 + grids.time.horizon]` from nodal terminal
/// values, keeping every time row.
pub fn solve_from_terminal<D: Driver + ?Sized>(
    terminal: Vec<f64>,
    t0: f64,
    grids: &Grids,
    band: &VolatilityBand,
    driver: &D,
) -> Result<ValueSurface> {
    check_inputs(&terminal, grids, band)?;
    let nx = grids.nx();
    let nt = grids.nt();
    let dt = grids.time.dt();
    let mut values = vec![0.0; (nt + 1) * nx];
    values[nt * nx..].copy_from_slice(&terminal);
    for k in (0..nt).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * nx);
        let prev = &tail[..nx];
        let out = &mut head[k * nx..];
        let t_next = t0 + grids.time.t(k + 1);
        step(prev, out, k + 1, t_next, dt, &grids.space, band, driver)
            .map_err(|j| Error::NonFinite { k, j, t: t0 + grids.time.t(k), x: grids.space.x(j) })?;
    }
    Ok(ValueSurface { grids: *grids, t0, values })
}

/// Runs the scheme without storing the surface, handing each row to
/// `visit(k, row)` from `k = nt` down to `0`; returns the row at `t0`.
pub fn sweep<D: Driver + ?Sized>(
    terminal: Vec<f64>,
    t0: f64,
    grids: &Grids,
    band: &VolatilityBand,
    driver: &D,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    check_inputs(&terminal, grids, band)?;
    let nx = grids.nx();
    let dt = grids.time.dt();
    let mut cur = terminal;
    let mut next = vec![0.0; nx];
    visit(grids.nt(), &cur);
    for k in (0..grids.nt()).rev() {
        let t_next = t0 + grids.time.t(k + 1);
        step(&cur, &mut next, k + 1, t_next, dt, &grids.space, band, driver)
            .map_err(|j| Error::NonFinite { k, j, t: t0 + grids.time.t(k), x: grids.space.x(j) })?;
        std::mem::swap(&mut cur, &mut next);
        visit(k, &cur);
    }
    Ok(cur)
}

/// As [`solve_from_terminal`], keeping only the row at `t0`.
pub fn solve_initial_row<D: Driver + ?Sized>(
    terminal: Vec<f64>,
    t0: f64,
    grids: &Grids,
    band: &VolatilityBand,
    driver: &D,
) -> Result<Vec<f64>> {
    sweep(terminal, t0, grids, band, driver, |_, _| {})
}

fn check_inputs(terminal: &[f64], grids: &Grids, band: &VolatilityBand) -> Result<()> {
    let ratio = grids.cfl_ratio(band);
    if ratio > crate::model::CFL_LIMIT {
        return Err(Error::Cfl { ratio });
    }
    if terminal.len() != grids.nx() {
        return Err(Error::GridMismatch(format!(
            "terminal data has {} values for {} space nodes",
            terminal.len(),
            grids.nx()
        )));
    }
    if let Some(j) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { k: grids.nt(), j, t: grids.time.horizon, x: grids.space.x(j) });
    }
    Ok(())
}

/// Solves the G-heat equation with driver `gen` and terminal `payoff` on `[0, T]`.
pub fn solve_gheat(payoff: &Payoff, gen: &Generator, band: &VolatilityBand, grids: &Grids) -> Result<ValueSurface> {
    let terminal: Vec<f64> = grids.space.xs().iter().map(|&x| payoff.eval(x)).collect();
    solve_from_terminal(terminal, 0.0, grids, band, gen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn band() -> VolatilityBand {
        VolatilityBand::new(0.5, 1.0).unwrap()
    }

    fn grids(nx: usize) -> Grids {
        Grids::for_band(&band(), 1.0, nx, 6.0, None).unwrap()
    }

    #[test]
    fn linear_payoff_is_a_fixed_point() {
        let g = grids(101);
        let u = solve_gheat(&Payoff::linear(1.0, 0.0), &Generator::zero(), &band(), &g).unwrap();
        for k in [0, g.nt() / 2, g.nt()] {
            for j in 0..g.nx() {
                assert!((u.value(k, j) - g.space.x(j)).abs() < 1e-12);
            }
        }
        let ux = first_derivative(&u);
        let uxx = second_derivative(&u);
        assert!(ux.values().iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(uxx.values().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn square_payoffs_match_closed_forms() {
        let g = grids(401);
        let mid = 200;
        let up = solve_gheat(&Payoff::square(1.0), &Generator::zero(), &band(), &g).unwrap();
        assert!((up.value(0, mid) - 1.0).abs() < 1e-9, "{}", up.value(0, mid));
        let down = solve_gheat(&Payoff::square(-1.0), &Generator::zero(), &band(), &g).unwrap();
        assert!((down.value(0, mid) + 0.25).abs() < 1e-9, "{}", down.value(0, mid));

        let ux = first_derivative(&up);
        let uxx = second_derivative(&up);
        // away from the truncated boundary
        for j in 190..=210 {
            assert!((ux.value(0, j) - 2.0 * g.space.x(j)).abs() < 1e-7);
            assert!((uxx.value(0, j) - 2.0).abs() < 1e-7, "{j} {}", uxx.value(0, j));
        }
    }

    #[test]
    fn terminal_row_is_sampled_payoff() {
        let g = grids(61);
        let p = Payoff::butterfly(0.2, 1.0).unwrap();
        let u = solve_gheat(&p, &Generator::zero(), &band(), &g).unwrap();
        for j in 0..g.nx() {
            assert_eq!(u.value(g.nt(), j), p.eval(g.space.x(j)));
        }
    }

    #[test]
    fn constant_driver_shifts_solution() {
        let g = grids(81);
        let p = Payoff::call(0.3);
        let u0 = solve_gheat(&p, &Generator::zero(), &band(), &g).unwrap();
        let uc = solve_gheat(&p, &Generator::constant(0.7), &band(), &g).unwrap();
        for k in 0..=g.nt() {
            let shift = 0.7 * (1.0 - g.time.t(k));
            for j in 0..g.nx() {
                assert!((uc.value(k, j) - u0.value(k, j) - shift).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn call_gradient_within_payoff_lipschitz_bound() {
        let g = grids(201);
        let u = solve_gheat(&Payoff::call(0.0), &Generator::zero(), &band(), &g).unwrap();
        let ux = first_derivative(&u);
        assert!(ux.row(0).iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn convexity_propagates() {
        let g = grids(201);
        let u = solve_gheat(&Payoff::call(0.25), &Generator::zero(), &band(), &g).unwrap();
        let uxx = second_derivative(&u);
        let tol = g.space.dx();
        for k in 0..=g.nt() {
            assert!(uxx.row(k)[1..g.nx() - 1].iter().all(|&v| v >= -tol));
        }
    }

    #[test]
    fn cfl_violation_and_non_finite_are_reported() {
        let good = grids(41);
        let bad = Grids { time: TimeGrid::new(1.0, 2).unwrap(), space: good.space };
        let err = solve_gheat(&Payoff::call(0.0), &Generator::zero(), &band(), &bad).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));

        let blowup = Generator::new(Arc::new(|_, y: f64, _| if y > 0.5 { f64::NAN } else { 0.0 }), 0.0);
        let err = solve_gheat(&Payoff::linear(1.0, 0.0), &blowup, &band(), &good).unwrap_err();
        match err {
            Error::NonFinite { k, j, .. } => {
                assert_eq!(k, good.nt() - 1);
                assert!(good.space.x(j) > 0.5);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn solve_is_deterministic_and_initial_row_matches() {
        let g = grids(121);
        let gen = Generator::new(Arc::new(|_, y: f64, z: f64| 0.2 * y.tanh() + 0.1 * z.tanh()), 0.2);
        let p = Payoff::butterfly(0.0, 1.0).unwrap();
        let a = solve_gheat(&p, &gen, &band(), &g).unwrap();
        let b = solve_gheat(&p, &gen, &band(), &g).unwrap();
        assert_eq!(a, b);
        let terminal = g.space.xs().iter().map(|&x| p.eval(x)).collect();
        let row = solve_initial_row(terminal, 0.0, &g, &band(), &gen).unwrap();
        assert_eq!(row.as_slice(), a.row(0));
    }
}
