//! The solution triple `(Y, Z, K)` of
//!
//! ```text
//! Y_t = ξ + ∫ₜᵀ f(s, Y, Z) ds + ∫ₜᵀ g(s, Y, Z) d⟨B⟩ − ∫ₜᵀ Z dB − (K_T − K_t)
//! ```
//!
//! realized along simulated paths from the PDE surfaces: `Y = u(t, B)`,
//! `Z = ∂ₓu(t, B)` and
//!
//! ```text
//! ΔK_k = (½ a_k r_k − G(a_k)) Δt,   a_k = ∂²ₓₓu(t_k, B_k) + 2g(t_k, Y_k, Z_k)
//! ```
//!
//! where `r_k ∈ [σ², σ̄²]` is the path's variance rate on the step. Every
//! increment is `≤ 0` in floating point, not just up to rounding: `G(a)` is
//! evaluated as `½·γ*(a)·a` with the same operation order, and rounding is
//! monotone.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expectation::{Path, PathBundle, VolPolicy};
use crate::model::{Generator, Grids, Payoff, TimeGrid, VolatilityBand};
use crate::pde::{first_derivative, row_derivatives, second_derivative, solve_from_terminal, solve_gheat, sweep, ValueSurface};

/// `u`, `∂ₓu` and `∂²ₓₓu` on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSolution {
    pub u: ValueSurface,
    pub ux: ValueSurface,
    pub uxx: ValueSurface,
}

impl MarkovSolution {
    pub fn from_surface(u: ValueSurface) -> Self {
        let ux = first_derivative(&u);
        let uxx = second_derivative(&u);
        Self { u, ux, uxx }
    }

    pub fn grids(&self) -> &Grids {
        self.u.grids()
    }

    /// `u(t0, 0)`.
    pub fn y0(&self) -> f64 {
        self.u.at(0, 0.0)
    }

    /// `(Y, Z, a)` at time row `k` and position `x`, with
    /// `a = ∂²ₓₓu + 2g(t, Y, Z)` the argument of `G`.
    #[inline]
    pub fn state(&self, gen: &Generator, k: usize, x: f64) -> (f64, f64, f64) {
        // one cell lookup for all three surfaces; same arithmetic as `at`
        let (j, w) = self.u.space().locate(x);
        let lerp = |s: &ValueSurface| {
            let r = &s.row(k)[j..j + 2];
            if w == 0.0 {
                r[0]
            } else {
                (1.0 - w) * r[0] + w * r[1]
            }
        };
        let (y, z) = (lerp(&self.u), lerp(&self.ux));
        let mut a = lerp(&self.uxx);
        if gen.has_g() {
            a += 2.0 * gen.g(self.u.t(k), y, z);
        }
        (y, z, a)
    }
}

/// Solves the PDE and differentiates the surface.
pub fn solve_markovian(payoff: &Payoff, gen: &Generator, band: &VolatilityBand, grids: &Grids) -> Result<MarkovSolution> {
    Ok(MarkovSolution::from_surface(solve_gheat(payoff, gen, band, grids)?))
}

/// Feedback control `h_k² = γ*(a(t_k, B_k))` attaining the supremum in `G`.
pub struct BangBang<'a> {
    pub solution: &'a MarkovSolution,
    pub generator: &'a Generator,
    pub band: VolatilityBand,
}

impl VolPolicy for BangBang<'_> {
    #[inline]
    fn rate(&self, k: usize, _t: f64, history: &[f64]) -> f64 {
        let (_, _, a) = self.solution.state(self.generator, k, history[k]);
        self.band.gamma_argmax(a)
    }

    fn label(&self) -> String {
        "bang-bang".into()
    }
}

/// `(Y, Z, K)` on one path; `dk[k] = K[k+1] − K[k]` as computed and `a[k]`
/// the argument of `G` that produced it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriplePath {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub k: Vec<f64>,
    pub dk: Vec<f64>,
    pub a: Vec<f64>,
}

/// Triples for every path of a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionTriple {
    pub time: TimeGrid,
    pub paths: Vec<TriplePath>,
    /// Path nodes that fell outside the space domain and were clamped.
    pub exits: usize,
}

impl SolutionTriple {
    /// Largest `K[k+1] − K[k]` over all paths and nodes.
    pub fn max_k_increment(&self) -> f64 {
        self.paths
            .iter()
            .flat_map(|p| p.k.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `ΔK = (½ a r − G(a)) Δt`.
#[inline]
pub fn k_increment(a: f64, rate: f64, dt: f64, band: &VolatilityBand) -> f64 {
    (0.5 * rate * a - band.g(a)) * dt
}

fn accumulate(
    path: &Path,
    time: &TimeGrid,
    band: &VolatilityBand,
    mut state: impl FnMut(usize, f64) -> (f64, f64, f64),
) -> TriplePath {
    let nt = time.steps;
    let dt = time.dt();
    let mut out = TriplePath {
        y: Vec::with_capacity(nt + 1),
        z: Vec::with_capacity(nt + 1),
        k: Vec::with_capacity(nt + 1),
        dk: Vec::with_capacity(nt),
        a: Vec::with_capacity(nt),
    };
    out.k.push(0.0);
    for k in 0..=nt {
        let (y, z, a) = state(k, path.b[k]);
        out.y.push(y);
        out.z.push(z);
        if k < nt {
            let d = k_increment(a, path.rate[k], dt, band);
            out.dk.push(d);
            out.a.push(a);
            out.k.push(out.k[k] + d);
        }
    }
    out
}

/// `(Y, Z, K)` along a single path.
pub fn triple_path(
    solution: &MarkovSolution,
    path: &Path,
    time: &TimeGrid,
    gen: &Generator,
    band: &VolatilityBand,
) -> TriplePath {
    accumulate(path, time, band, |k, x| solution.state(gen, k, x))
}

fn count_exits(bundle: &PathBundle, grids: &Grids) -> usize {
    bundle.paths.iter().flat_map(|p| &p.b).filter(|&&x| !grids.space.contains(x)).count()
}

/// Evaluates `Y`, `Z` and `K` along every path of the bundle.
pub fn extract_triple(
    solution: &MarkovSolution,
    bundle: &PathBundle,
    gen: &Generator,
    band: &VolatilityBand,
) -> Result<SolutionTriple> {
    if solution.u.time() != &bundle.time || solution.u.t0() != 0.0 {
        return Err(Error::GridMismatch(format!(
            "surface time grid {:?} differs from bundle time grid {:?}",
            solution.u.time(),
            bundle.time
        )));
    }
    let paths = bundle
        .paths
        .par_iter()
        .map(|p| triple_path(solution, p, &bundle.time, gen, band))
        .collect();
    Ok(SolutionTriple { time: bundle.time, paths, exits: count_exits(bundle, solution.grids()) })
}

/// `ξ = φ(B_T)` with `B_T` clamped to the space domain, as in the triple.
pub fn terminal_value(payoff: &Payoff, grids: &Grids, path: &Path) -> f64 {
    let x = *path.b.last().unwrap();
    payoff.eval(x.clamp(grids.space.lo, grids.space.hi))
}

/// Signed residuals
/// `r_k = Y_k − [ξ + Σ_{j≥k}(f_j Δt + g_j Δ⟨B⟩_j − Z_j ΔB_j) − (K_T − K_k)]`.
pub fn signed_residuals(triple: &TriplePath, path: &Path, time: &TimeGrid, gen: &Generator, xi: f64) -> Vec<f64> {
    let nt = time.steps;
    let dt = time.dt();
    let k_t = triple.k[nt];
    let mut out = vec![0.0; nt + 1];
    let mut tail = 0.0;
    out[nt] = triple.y[nt] - xi;
    for k in (0..nt).rev() {
        let t = time.t(k);
        let (y, z) = (triple.y[k], triple.z[k]);
        let dqv = path.rate[k] * dt;
        tail += gen.f(t, y, z) * dt + gen.g(t, y, z) * dqv - z * (path.b[k + 1] - path.b[k]);
        out[k] = y - (xi + tail - (k_t - triple.k[k]));
    }
    out
}

/// Largest absolute residual of the backward equation along one path.
pub fn bsde_residual(triple: &TriplePath, path: &Path, time: &TimeGrid, gen: &Generator, xi: f64) -> f64 {
    signed_residuals(triple, path, time, gen, xi).iter().fold(0.0, |m, r| m.max(r.abs()))
}

/// Largest residual over all paths of a bundle, with `ξ` from `xi(path)`.
pub fn max_residual(
    triple: &SolutionTriple,
    bundle: &PathBundle,
    gen: &Generator,
    xi: impl Fn(&Path) -> f64 + Sync,
) -> f64 {
    triple
        .paths
        .par_iter()
        .zip(&bundle.paths)
        .map(|(tp, p)| bsde_residual(tp, p, &bundle.time, gen, xi(p)))
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max)
}

/// `(Y, Z, ∂²ₓₓu)` at `x` from a single row, interpolated exactly as the
/// stored surfaces are.
fn row_state(row: &[f64], space: &crate::model::SpaceGrid, x: f64) -> (f64, f64, f64) {
    let (j, w) = space.locate(x);
    let dx = space.dx();
    let (z0, a0) = row_derivatives(row, dx, j);
    if w == 0.0 {
        return (row[j], z0, a0);
    }
    let (z1, a1) = row_derivatives(row, dx, j + 1);
    let lerp = |l: f64, r: f64| (1.0 - w) * l + w * r;
    (lerp(row[j], row[j + 1]), lerp(z0, z1), lerp(a0, a1))
}

/// Largest residual along each path, accumulated during the backward sweep
/// so that no surface is stored. Paths must come from an open-loop control on
/// the grid's time nodes. Returns `Y₀` and the per-path maxima.
pub fn streamed_residuals(
    payoff: &Payoff,
    gen: &Generator,
    band: &VolatilityBand,
    grids: &Grids,
    paths: &[Path],
) -> Result<(f64, Vec<f64>)> {
    let nt = grids.nt();
    if let Some(p) = paths.iter().find(|p| p.steps() != nt) {
        return Err(Error::GridMismatch(format!("path has {} steps, grid has {nt}", p.steps())));
    }
    let dt = grids.time.dt();
    let space = grids.space;
    let xi: Vec<f64> = paths.iter().map(|p| terminal_value(payoff, grids, p)).collect();
    // (tail, K_T − K_k, max |r|) per path
    let mut acc = vec![(0.0f64, 0.0f64, 0.0f64); paths.len()];
    let terminal = space.xs().iter().map(|&x| payoff.eval(x)).collect();
    let row0 = sweep(terminal, 0.0, grids, band, gen, |k, row| {
        let t = grids.time.t(k);
        for ((p, st), &xi) in paths.iter().zip(acc.iter_mut()).zip(&xi) {
            let (y, z, uxx) = row_state(row, &space, p.b[k]);
            if k < nt {
                let rate = p.rate[k];
                let (f, g) = (gen.f(t, y, z), gen.g(t, y, z));
                let a = if gen.has_g() { uxx + 2.0 * g } else { uxx };
                st.0 += f * dt + g * rate * dt - z * (p.b[k + 1] - p.b[k]);
                st.1 += k_increment(a, rate, dt, band);
            }
            st.2 = st.2.max((y - (xi + st.0 - st.1)).abs());
        }
    })?;
    Ok((space.interpolate(&row0, 0.0), acc.into_iter().map(|s| s.2).collect()))
}

pub type TwoEpochFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Terminal data `ξ = ψ(B_{t₁}, B_T − B_{t₁})`.
#[derive(Clone)]
pub struct TwoEpochProblem {
    pub t1: f64,
    pub psi: TwoEpochFn,
    pub generator: Generator,
    pub band: VolatilityBand,
    pub grids: Grids,
}

impl fmt::Debug for TwoEpochProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TwoEpochProblem")
            .field("t1", &self.t1)
            .field("generator", &self.generator)
            .field("band", &self.band)
            .field("grids", &self.grids)
            .finish()
    }
}

/// Cap on `nx² × steps` for the frozen-parameter family.
pub const FAMILY_WORK_BUDGET: f64 = 2.0e10;

/// Frozen-parameter family on `[t₁, T]` pasted into an epoch-0 solution.
#[derive(Debug, Clone)]
pub struct TwoEpochSolution {
    pub problem: TwoEpochProblem,
    /// Time node of `t₁`.
    pub k1: usize,
    /// `u(t₁, x_i, 0)` for every frozen node `x_i`.
    pub frozen_values: Vec<f64>,
    /// Solution on `[0, t₁]` with terminal data `frozen_values`.
    pub epoch0: MarkovSolution,
    epoch1_grids: Grids,
}

/// Solves the frozen family on `[t₁, T]`, pastes `Y_{t₁}` on the space grid
/// (the cell of `x_i` is `[x_i − Δx/2, x_i + Δx/2)`), then solves `[0, t₁]`.
pub fn solve_two_epoch(problem: &TwoEpochProblem) -> Result<TwoEpochSolution> {
    let grids = &problem.grids;
    let horizon = grids.time.horizon;
    if !(problem.t1 > 0.0 && problem.t1 < horizon) {
        return Err(Error::Domain(format!("t1 = {} must lie in (0, {horizon})", problem.t1)));
    }
    let k1 = grids
        .time
        .node_of(problem.t1)
        .ok_or_else(|| Error::GridMismatch(format!("t1 = {} is not a time node", problem.t1)))?;
    if k1 == 0 || k1 == grids.nt() {
        return Err(Error::Domain("t1 must be an interior time node".into()));
    }
    let nx = grids.nx();
    let work = (nx * nx) as f64 * (grids.nt() - k1) as f64;
    if work > FAMILY_WORK_BUDGET {
        return Err(Error::Budget(format!("frozen family needs {work:.3e} node-steps")));
    }
    let t1 = grids.time.t(k1);
    let epoch1_grids = Grids { time: TimeGrid::new(horizon - t1, grids.nt() - k1)?, space: grids.space };
    let epoch0_grids = Grids { time: TimeGrid::new(t1, k1)?, space: grids.space };
    let xs = grids.space.xs();

    let frozen_values: Result<Vec<f64>> = xs
        .par_iter()
        .map(|&xi| {
            let terminal = xs.iter().map(|&y| (problem.psi)(xi, y)).collect();
            let row = crate::pde::solve_initial_row(terminal, t1, &epoch1_grids, &problem.band, &problem.generator)?;
            Ok(grids.space.interpolate(&row, 0.0))
        })
        .collect();
    let frozen_values = frozen_values?;
    let u0 = solve_from_terminal(frozen_values.clone(), 0.0, &epoch0_grids, &problem.band, &problem.generator)?;
    Ok(TwoEpochSolution {
        problem: problem.clone(),
        k1,
        frozen_values,
        epoch0: MarkovSolution::from_surface(u0),
        epoch1_grids,
    })
}

impl TwoEpochSolution {
    pub fn y0(&self) -> f64 {
        self.epoch0.y0()
    }

    /// Full surfaces of the family member frozen at node `i`, on `[t₁, T]`.
    pub fn member(&self, i: usize) -> Result<MarkovSolution> {
        let p = &self.problem;
        let xi = p.grids.space.x(i);
        let terminal = p.grids.space.xs().iter().map(|&y| (p.psi)(xi, y)).collect();
        let t1 = p.grids.time.t(self.k1);
        Ok(MarkovSolution::from_surface(solve_from_terminal(
            terminal,
            t1,
            &self.epoch1_grids,
            &p.band,
            &p.generator,
        )?))
    }

    /// `ξ = ψ(B_{t₁}, B_T − B_{t₁})`, positions clamped to the domain.
    pub fn terminal_value(&self, path: &Path) -> f64 {
        let s = &self.problem.grids.space;
        let x = path.b[self.k1].clamp(s.lo, s.hi);
        let y = (path.b[path.b.len() - 1] - path.b[self.k1]).clamp(s.lo, s.hi);
        (self.problem.psi)(x, y)
    }

    /// `(Y, Z, K)` along each path: epoch-0 surfaces before `t₁`, then the
    /// member frozen at the node nearest `B_{t₁}`, evaluated at `B_t − B_{t₁}`.
    pub fn extract_triple(&self, bundle: &PathBundle) -> Result<SolutionTriple> {
        let p = &self.problem;
        if bundle.time != p.grids.time {
            return Err(Error::GridMismatch("bundle time grid differs from the problem grid".into()));
        }
        let space = &p.grids.space;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (idx, path) in bundle.paths.iter().enumerate() {
            groups.entry(space.nearest(path.b[self.k1])).or_default().push(idx);
        }
        let mut paths = vec![TriplePath::default(); bundle.len()];
        for (i, members) in groups {
            let member = self.member(i)?;
            let k1 = self.k1;
            let gen = &p.generator;
            let done: Vec<(usize, TriplePath)> = members
                .par_iter()
                .map(|&idx| {
                    let path = &bundle.paths[idx];
                    let anchor = path.b[k1];
                    let tp = accumulate(path, &bundle.time, &p.band, |k, x| {
                        if k < k1 {
                            self.epoch0.state(gen, k, x)
                        } else {
                            member.state(gen, k - k1, x - anchor)
                        }
                    });
                    (idx, tp)
                })
                .collect();
            for (idx, tp) in done {
                paths[idx] = tp;
            }
        }
        Ok(SolutionTriple { time: bundle.time, paths, exits: count_exits(bundle, &p.grids) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expectation::{g_expectation, simulate_paths, IncrementPayoff, VolControl};

    fn band() -> VolatilityBand {
        VolatilityBand::new(0.5, 1.0).unwrap()
    }

    fn grids(nx: usize) -> Grids {
        Grids::for_band(&band(), 1.0, nx, 6.0, None).unwrap()
    }

    #[test]
    fn markov_surfaces_for_simple_payoffs() {
        let g = grids(201);
        let lin = solve_markovian(&Payoff::linear(1.0, 0.0), &Generator::zero(), &band(), &g).unwrap();
        assert!(lin.ux.values().iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(lin.uxx.values().iter().all(|v| v.abs() < 1e-6));
        let sq = solve_markovian(&Payoff::square(1.0), &Generator::zero(), &band(), &g).unwrap();
        assert!((sq.y0() - 1.0).abs() < 1e-9);
        let shifted = solve_markovian(&Payoff::square(1.0), &Generator::constant(0.3), &band(), &g).unwrap();
        assert!((shifted.y0() - 1.3).abs() < 1e-9);
    }

    #[test]
    fn square_payoff_k_closed_forms() {
        let g = grids(201);
        let sol = solve_markovian(&Payoff::square(1.0), &Generator::zero(), &band(), &g).unwrap();
        let up = simulate_paths(&VolControl::upper(g.nt(), &band()), 20, 1, &g.time).unwrap();
        let tri = extract_triple(&sol, &up, &Generator::zero(), &band()).unwrap();
        for p in &tri.paths {
            assert!(p.k.iter().all(|k| k.abs() < 1e-9));
        }
        let lo = simulate_paths(&VolControl::lower(g.nt(), &band()), 20, 1, &g.time).unwrap();
        let tri = extract_triple(&sol, &lo, &Generator::zero(), &band()).unwrap();
        for p in &tri.paths {
            for k in 0..=g.nt() {
                assert!((p.k[k] + 0.75 * g.time.t(k)).abs() < 1e-9);
            }
            assert!(p.dk.iter().all(|&d| d < 0.0));
        }
    }

    #[test]
    fn linear_payoff_triple() {
        let g = grids(101);
        let sol = solve_markovian(&Payoff::linear(1.0, 0.0), &Generator::zero(), &band(), &g).unwrap();
        let c = VolControl::random(&band(), g.nt(), 4, 1, 1);
        let bundle = simulate_paths(&c, 10, 3, &g.time).unwrap();
        let tri = extract_triple(&sol, &bundle, &Generator::zero(), &band()).unwrap();
        for (tp, p) in tri.paths.iter().zip(&bundle.paths) {
            assert!(tp.k.iter().all(|&k| k.abs() < 1e-9));
            assert!(tp.z.iter().all(|&z| (z - 1.0).abs() < 1e-9));
            assert!(tp.y.iter().zip(&p.b).all(|(y, b)| (y - b).abs() < 1e-9));
        }
    }

    #[test]
    fn increments_never_positive_and_bang_bang_flat() {
        let g = grids(121);
        let gen = Generator::new(Arc::new(|_, y: f64, z: f64| 0.2 * y.tanh() + 0.1 * z.tanh()), 0.2)
            .with_g(Arc::new(|_, y: f64, _| 0.1 * y.sin()));
        let sol = solve_markovian(&Payoff::butterfly(0.0, 1.0).unwrap(), &gen, &band(), &g).unwrap();
        for i in 0..4 {
            let c = VolControl::random(&band(), g.nt(), 6, 5, i);
            let bundle = simulate_paths(&c, 30, 8, &g.time).unwrap();
            let tri = extract_triple(&sol, &bundle, &gen, &band()).unwrap();
            assert!(tri.max_k_increment() <= 0.0);
            assert!(tri.paths.iter().flat_map(|p| &p.dk).all(|&d| d <= 0.0));
        }
        let bb = BangBang { solution: &sol, generator: &gen, band: band() };
        let bundle = simulate_paths(&bb, 30, 8, &g.time).unwrap();
        let tri = extract_triple(&sol, &bundle, &gen, &band()).unwrap();
        assert!(tri.paths.iter().flat_map(|p| &p.k).all(|&k| k == 0.0));
    }

    #[test]
    fn zero_triple_has_zero_residual() {
        let time = TimeGrid::new(1.0, 10).unwrap();
        let path = Path { b: vec![0.0; 11], qv: vec![0.0; 11], rate: vec![1.0; 10] };
        let tp = TriplePath { y: vec![0.0; 11], z: vec![0.0; 11], k: vec![0.0; 11], dk: vec![0.0; 10], a: vec![0.0; 10] };
        assert_eq!(bsde_residual(&tp, &path, &time, &Generator::zero(), 0.0), 0.0);
    }

    #[test]
    fn residual_sensitivity_to_z_shift() {
        let g = grids(101);
        let sol = solve_markovian(&Payoff::square(1.0), &Generator::zero(), &band(), &g).unwrap();
        let bundle = simulate_paths(&VolControl::upper(g.nt(), &band()), 5, 2, &g.time).unwrap();
        let tri = extract_triple(&sol, &bundle, &Generator::zero(), &band()).unwrap();
        let eps = 0.01;
        for (tp, p) in tri.paths.iter().zip(&bundle.paths) {
            let xi = terminal_value(&Payoff::square(1.0), &g, p);
            let base = signed_residuals(tp, p, &g.time, &Generator::zero(), xi);
            let mut shifted = tp.clone();
            shifted.z.iter_mut().for_each(|z| *z += eps);
            let moved = signed_residuals(&shifted, p, &g.time, &Generator::zero(), xi);
            let nt = g.nt();
            for k in 0..=nt {
                // r_k moves by +ε Σ_{j≥k} ΔB_j
                let expected = eps * (p.b[nt] - p.b[k]);
                assert!((moved[k] - base[k] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn signed_residuals_split_into_symmetric_and_decreasing_parts() {
        let g = grids(81);
        let gen = Generator::new(Arc::new(|_, y: f64, z: f64| 0.2 * y.tanh() + 0.1 * z.tanh()), 0.2)
            .with_g(Arc::new(|_, _, z: f64| 0.05 * z.tanh()));
        let sol = solve_markovian(&Payoff::call(0.0), &gen, &band(), &g).unwrap();
        let bundle = simulate_paths(&VolControl::random(&band(), g.nt(), 3, 2, 0), 5, 4, &g.time).unwrap();
        let tri = extract_triple(&sol, &bundle, &gen, &band()).unwrap();
        let dt = g.time.dt();
        for (tp, p) in tri.paths.iter().zip(&bundle.paths) {
            let r = signed_residuals(tp, p, &g.time, &gen, terminal_value(&Payoff::call(0.0), &g, p));
            let mut drift = 0.0;
            let mut mart = 0.0;
            for k in 0..=g.nt() {
                let d = tp.y[k] - tp.y[0] + drift - mart - tp.k[k];
                assert!((d - (r[k] - r[0])).abs() < 1e-10);
                if k < g.nt() {
                    let t = g.time.t(k);
                    drift += gen.f(t, tp.y[k], tp.z[k]) * dt + gen.g(t, tp.y[k], tp.z[k]) * p.rate[k] * dt;
                    mart += tp.z[k] * (p.b[k + 1] - p.b[k]);
                }
            }
        }
    }

    #[test]
    fn residual_shrinks_under_refinement_for_square() {
        let coarse = grids(101);
        let fine = coarse.refined(1);
        let c = VolControl::random(&band(), fine.nt(), 4, 9, 0);
        let fine_bundle = simulate_paths(&c, 40, 6, &fine.time).unwrap();
        let coarse_bundle = fine_bundle.coarsen(4).unwrap();
        let measure = |g: &Grids, b: &PathBundle| {
            let sol = solve_markovian(&Payoff::square(1.0), &Generator::zero(), &band(), g).unwrap();
            let tri = extract_triple(&sol, b, &Generator::zero(), &band()).unwrap();
            max_residual(&tri, b, &Generator::zero(), |p| terminal_value(&Payoff::square(1.0), g, p))
        };
        let rc = measure(&coarse, &coarse_bundle);
        let rf = measure(&fine, &fine_bundle);
        assert!(rf < rc, "{rf} !< {rc}");
    }

    #[test]
    fn y0_converges_under_refinement() {
        let p = Payoff::butterfly(0.0, 1.0).unwrap();
        let y: Vec<f64> = (0..4)
            .map(|l| solve_markovian(&p, &Generator::zero(), &band(), &grids(101).refined(l)).unwrap().y0())
            .collect();
        let d: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(d[1].abs() < d[0].abs() && d[2].abs() < d[1].abs(), "{y:?}");
        // Aitken limits from two overlapping triples agree to within the last step
        let aitken = |a: f64, b: f64, c: f64| c - (c - b) * (c - b) / ((c - b) - (b - a));
        let lim_lo = aitken(y[0], y[1], y[2]);
        let lim_hi = aitken(y[1], y[2], y[3]);
        assert!((lim_lo - lim_hi).abs() < d[2].abs(), "{y:?} {lim_lo} {lim_hi}");
    }

    #[test]
    fn streamed_residuals_match_stored_surfaces() {
        let g = grids(101);
        let gen = Generator::new(Arc::new(|_, y: f64, z: f64| 0.2 * y.tanh() + 0.1 * z.tanh()), 0.2);
        let call = Payoff::call(0.0);
        let sol = solve_markovian(&call, &gen, &band(), &g).unwrap();
        let bundle = simulate_paths(&VolControl::random(&band(), g.nt(), 4, 3, 0), 8, 5, &g.time).unwrap();
        let tri = extract_triple(&sol, &bundle, &gen, &band()).unwrap();
        let (y0, streamed) = streamed_residuals(&call, &gen, &band(), &g, &bundle.paths).unwrap();
        assert_eq!(y0, sol.y0());
        for ((tp, p), r) in tri.paths.iter().zip(&bundle.paths).zip(streamed) {
            let stored = bsde_residual(tp, p, &g.time, &gen, terminal_value(&call, &g, p));
            assert!((stored - r).abs() < 1e-12, "{stored} vs {r}");
        }
    }

    #[test]
    fn two_epoch_matches_lattice() {
        let g = grids(121).aligned_to(&[0.5]).unwrap();
        let problem = TwoEpochProblem {
            t1: 0.5,
            psi: Arc::new(|x, y| x * x + y * y),
            generator: Generator::zero(),
            band: band(),
            grids: g,
        };
        let sol = solve_two_epoch(&problem).unwrap();
        assert!((sol.y0() - 1.0).abs() < 1e-6, "{}", sol.y0());
        let lattice = g_expectation(
            &IncrementPayoff::new(vec![0.5, 1.0], Arc::new(|d: &[f64]| d[0] * d[0] + d[1] * d[1])).unwrap(),
            &band(),
            &g,
        )
        .unwrap();
        assert!((sol.y0() - lattice).abs() < 1e-6);

        let concave = TwoEpochProblem { psi: Arc::new(|x, y| -(x + y) * (x + y)), ..problem.clone() };
        let sol = solve_two_epoch(&concave).unwrap();
        assert!((sol.y0() + 0.25).abs() < 1e-6, "{}", sol.y0());

        let bad = TwoEpochProblem { t1: 1.0, ..problem };
        assert!(solve_two_epoch(&bad).is_err());
    }

    #[test]
    fn two_epoch_linear_is_consistent_with_markov() {
        let g = grids(81).aligned_to(&[0.5]).unwrap();
        let problem = TwoEpochProblem {
            t1: 0.5,
            psi: Arc::new(|x, y| x + y),
            generator: Generator::zero(),
            band: band(),
            grids: g,
        };
        let sol = solve_two_epoch(&problem).unwrap();
        assert!(sol.y0().abs() < 1e-12);
        let bundle = simulate_paths(&VolControl::random(&band(), g.nt(), 4, 1, 3), 12, 2, &g.time).unwrap();
        let tri = sol.extract_triple(&bundle).unwrap();
        // after t₁ the frozen first increment is the nearest node to B_{t₁}
        let half = 0.5 * g.space.dx() + 1e-9;
        for (tp, p) in tri.paths.iter().zip(&bundle.paths) {
            for k in 0..=g.nt() {
                let tol = if k < sol.k1 { 1e-9 } else { half };
                assert!((tp.y[k] - p.b[k]).abs() < tol, "k={k}: {} vs {}", tp.y[k], p.b[k]);
            }
            assert!(tp.k.iter().all(|&k| k.abs() < 1e-9));
            assert!(bsde_residual(tp, p, &g.time, &Generator::zero(), sol.terminal_value(p)) < half);
        }
    }
}
