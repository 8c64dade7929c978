//! Numerical checks of the structural properties of a solved problem: `K` is
//! decreasing and a G-martingale, the solution obeys its explicit Hölder
//! bound, and the a priori estimates hold with finite constants that are
//! stable under refinement.
//!
//! Every check yields a [`VerifyReport`] whose `pass` flag is exactly
//! `measured ≤ bound + tolerance` (a NaN measurement fails).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{k_increment, solve_markovian, triple_path, BangBang, MarkovSolution, SolutionTriple, TriplePath};
use crate::error::{Error, Result};
use crate::expectation::{map_paths, simulate_path, McEstimate, Path, PathBundle, VolControl, VolPolicy};
use crate::model::{Generator, GeneratorFn, Grids, Payoff, TimeGrid, VolatilityBand};
use crate::pde::{first_derivative, solve_from_terminal, solve_gheat, Driver, NoDriver, ValueSurface};

/// Grid metadata attached to a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridMeta {
    pub horizon: f64,
    pub nt: usize,
    pub nx: usize,
    pub x_lo: f64,
    pub x_hi: f64,
}

impl From<&Grids> for GridMeta {
    fn from(g: &Grids) -> Self {
        Self { horizon: g.time.horizon, nt: g.nt(), nx: g.nx(), x_lo: g.space.lo, x_hi: g.space.hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub grid: GridMeta,
    pub details: BTreeMap<String, f64>,
}

impl VerifyReport {
    pub fn new(name: impl Into<String>, measured: f64, bound: f64, tolerance: f64, grid: GridMeta) -> Self {
        Self {
            name: name.into(),
            pass: measured <= bound + tolerance,
            measured,
            bound,
            tolerance,
            grid,
            details: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

/// Knobs shared by the checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyParams {
    /// Moment order of the a priori estimates, `> 1`.
    pub alpha: f64,
    /// The `ε` of the weakened Lipschitz condition.
    pub eps: f64,
    /// Its constant `L^w`; the generator's `L` when unset.
    pub lw: Option<f64>,
    /// Width of the final time slab, in steps, excluded from checks that use
    /// second derivatives.
    pub kappa_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Random controls sampled in addition to the two constant ones.
    pub controls: usize,
    /// Piecewise-constant segments per random control.
    pub segments: usize,
    /// Discretization allowance for the bang-bang side of martingale checks.
    pub grid_tol: f64,
    /// Relative tolerance on the Hölder constant.
    pub lipschitz_tol: f64,
    /// Allowed increase of the `Y` estimate constant under refinement.
    pub rho_tol: f64,
    /// Allowed drift of the `Z`/`K` estimate constants under refinement.
    pub drift_tol: f64,
    /// Allowed excess over proportional shrinking in the stability check.
    pub scaling_tol: f64,
    /// Perturbation sizes of the stability check's generator family.
    pub perturbations: Vec<f64>,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            eps: 0.0,
            lw: None,
            kappa_steps: 4,
            n_paths: 1000,
            seed: 0,
            controls: 8,
            segments: 8,
            grid_tol: 5e-3,
            lipschitz_tol: 0.05,
            rho_tol: 0.05,
            drift_tol: 0.10,
            scaling_tol: 0.20,
            perturbations: vec![0.1, 0.05, 0.025],
        }
    }
}

impl VerifyParams {
    fn check_alpha(&self) -> Result<()> {
        if self.alpha > 1.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("alpha must be > 1, got {}", self.alpha)))
        }
    }

    /// `f⁰(t) = |f(t, 0, 0)| + L^w ε`.
    pub fn f0(&self, gen: &Generator, t: f64) -> f64 {
        gen.f0(t) + self.lw.unwrap_or(gen.lipschitz()) * self.eps
    }

    fn k_end(&self, nt: usize) -> usize {
        nt.saturating_sub(self.kappa_steps)
    }
}

/// `σ`, `σ̄` and `count` random piecewise-constant controls.
pub fn control_family(band: &VolatilityBand, steps: usize, count: usize, segments: usize, seed: u64) -> Vec<VolControl> {
    let mut out = vec![VolControl::lower(steps, band), VolControl::upper(steps, band)];
    out.extend((0..count as u64).map(|i| VolControl::random(band, steps, segments, seed, i)));
    out
}

/// Standard-normal panels, one per path, shared by every control.
pub fn normal_panels(seed: u64, n_paths: usize, steps: usize) -> Vec<Vec<f64>> {
    map_paths(n_paths, seed, steps, |_, z| z.to_vec())
}

/// Simulates one path per panel under `policy` and maps it, in path order.
pub fn over_paths<P, R, F>(policy: &P, panels: &[Vec<f64>], time: &TimeGrid, f: F) -> Vec<R>
where
    P: VolPolicy + ?Sized,
    R: Send,
    F: Fn(&Path) -> R + Sync,
{
    panels.par_iter().map(|z| f(&simulate_path(policy, z, time))).collect()
}

/// Running summary of K-increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncrementTally {
    pub increments: usize,
    pub zeros: usize,
    pub max: f64,
    /// Increments whose vanishing disagrees with `½·a·h² = G(a)`.
    pub tight_mismatches: usize,
}

impl Default for IncrementTally {
    fn default() -> Self {
        Self { increments: 0, zeros: 0, max: f64::NEG_INFINITY, tight_mismatches: 0 }
    }
}

impl IncrementTally {
    pub fn record(&mut self, path: &Path, triple: &TriplePath, band: &VolatilityBand) {
        for ((&d, &a), &r) in triple.dk.iter().zip(&triple.a).zip(&path.rate) {
            self.increments += 1;
            self.max = self.max.max(d);
            if d == 0.0 {
                self.zeros += 1;
            }
            if (d == 0.0) != (0.5 * r * a == band.g(a)) {
                self.tight_mismatches += 1;
            }
        }
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            increments: self.increments + o.increments,
            zeros: self.zeros + o.zeros,
            max: self.max.max(o.max),
            tight_mismatches: self.tight_mismatches + o.tight_mismatches,
        }
    }
}

/// Report on a tally: the largest increment must be `≤ 0`, with no tolerance.
pub fn decreasing_report(tally: &IncrementTally, grids: &Grids) -> VerifyReport {
    let measured = if tally.increments == 0 { 0.0 } else { tally.max };
    VerifyReport::new("check_decreasing", measured, 0.0, 0.0, grids.into())
        .with("increments", tally.increments as f64)
        .with("zero_increments", tally.zeros as f64)
        .with("tight_mismatches", tally.tight_mismatches as f64)
}

/// Every discrete increment of `K`, over all paths of all given triples.
pub fn check_decreasing(sets: &[(&SolutionTriple, &PathBundle)], band: &VolatilityBand, grids: &Grids) -> VerifyReport {
    let mut tally = IncrementTally::default();
    for (triple, bundle) in sets {
        for (tp, p) in triple.paths.iter().zip(&bundle.paths) {
            tally.record(p, tp, band);
        }
    }
    decreasing_report(&tally, grids)
}

/// Per-control statistics of `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct KStats {
    pub label: String,
    /// `K` at the end of the checked window `[0, T − κ]`.
    pub k_end: McEstimate,
    pub tally: IncrementTally,
    /// `B_T` per path, for payoff statistics on the same paths.
    pub b_terminal: Vec<f64>,
}

/// Simulates the panels under `policy` and summarizes `K`.
pub fn k_stats<P: VolPolicy + ?Sized>(
    solution: &MarkovSolution,
    gen: &Generator,
    band: &VolatilityBand,
    policy: &P,
    panels: &[Vec<f64>],
    k_end: usize,
) -> KStats {
    let time = solution.grids().time;
    let rows = over_paths(policy, panels, &time, |p| {
        let tp = triple_path(solution, p, &time, gen, band);
        let mut tally = IncrementTally::default();
        tally.record(p, &tp, band);
        (tp.k[k_end], tally, p.b[time.steps])
    });
    let ks: Vec<f64> = rows.iter().map(|r| r.0).collect();
    KStats {
        label: policy.label(),
        k_end: McEstimate::from_samples(&ks),
        tally: rows.iter().fold(IncrementTally::default(), |t, r| t.merge(r.1)),
        b_terminal: rows.iter().map(|r| r.2).collect(),
    }
}

/// `K` statistics under the sampled family followed by the bang-bang control.
pub fn family_k_stats(
    solution: &MarkovSolution,
    gen: &Generator,
    band: &VolatilityBand,
    params: &VerifyParams,
) -> Vec<KStats> {
    let time = solution.grids().time;
    let panels = normal_panels(params.seed, params.n_paths, time.steps);
    let k_end = params.k_end(time.steps);
    let mut out: Vec<KStats> = control_family(band, time.steps, params.controls, params.segments, params.seed)
        .iter()
        .map(|c| k_stats(solution, gen, band, c, &panels, k_end))
        .collect();
    let bb = BangBang { solution, generator: gen, band: *band };
    out.push(k_stats(solution, gen, band, &bb, &panels, k_end));
    out
}

/// Two-sided martingale test on `K` at `T − κ`: no sampled control has a
/// significantly positive mean, and the last entry (the control attaining the
/// supremum) has mean zero within `max(3·stderr, grid_tol)`.
///
/// `measured` is the larger of the two slacks, so the check passes iff it is
/// `≤ 0`.
pub fn martingale_report(name: &str, stats: &[KStats], grid_tol: f64, grids: &Grids) -> VerifyReport {
    let (attaining, others) = stats.split_last().expect("at least one control");
    let side_a = others.iter().map(|s| s.k_end.mean - 3.0 * s.k_end.stderr).fold(f64::NEG_INFINITY, f64::max);
    let e = attaining.k_end;
    let side_b = e.mean.abs() - (3.0 * e.stderr).max(grid_tol);
    let measured = if others.is_empty() { side_b } else { side_a.max(side_b) };
    let worst_other = others.iter().map(|s| s.k_end.mean).fold(f64::NEG_INFINITY, f64::max);
    VerifyReport::new(name, measured, 0.0, 0.0, grids.into())
        .with("side_a_slack", side_a)
        .with("side_b_slack", side_b)
        .with("attaining_mean", e.mean)
        .with("attaining_stderr", e.stderr)
        .with("max_other_mean", worst_other)
        .with("controls", stats.len() as f64)
        .with("paths", e.n as f64)
}

pub fn check_martingale_k(
    solution: &MarkovSolution,
    gen: &Generator,
    band: &VolatilityBand,
    params: &VerifyParams,
) -> VerifyReport {
    let stats = family_k_stats(solution, gen, band, params);
    martingale_report("check_martingale_K", &stats, params.grid_tol, solution.grids())
        .with("kappa_steps", params.kappa_steps as f64)
}

/// `L₁ = max{L̂, L̂σ̄ + L̃√T}` with `L̂ = L_φ e^{L_h T}` and `L̃ = sup|h|`.
pub fn holder_constant(l_phi: f64, l_h: f64, sup_h: f64, band: &VolatilityBand, horizon: f64) -> f64 {
    let l_hat = l_phi * (l_h * horizon).exp();
    l_hat.max(l_hat * band.sigma_hi() + sup_h * horizon.sqrt())
}

/// `sup |f(t, u, ∂ₓu)|` over the surface: the generator's size along the
/// solution it actually drives.
pub fn realized_generator_sup(u: &ValueSurface, gen: &Generator) -> f64 {
    if !gen.has_f() {
        return 0.0;
    }
    let ux = first_derivative(u);
    (0..=u.nt())
        .into_par_iter()
        .map(|k| {
            let t = u.t(k);
            u.row(k).iter().zip(ux.row(k)).map(|(&y, &z)| gen.f(t, y, z).abs()).fold(0.0, f64::max)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max)
}

fn lags(n: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |&l| Some(l * 2)).take_while(|&l| l <= n).collect()
}

/// Largest `|u(t,x) − u(s,y)| / (√|t−s| + |x−y|)` over node pairs whose time
/// and space offsets are powers of two (or zero).
pub fn holder_ratio(u: &ValueSurface) -> f64 {
    let nt = u.nt();
    let nx = u.nx();
    let dt = u.time().dt();
    let dx = u.space().dx();
    let t_lags: Vec<usize> = std::iter::once(0).chain(lags(nt)).collect();
    let x_lags: Vec<usize> = std::iter::once(0).chain(lags(nx - 1)).collect();
    (0..=nt)
        .into_par_iter()
        .map(|k| {
            let mut worst: f64 = 0.0;
            let row = u.row(k);
            for &dk in t_lags.iter().take_while(|&&d| k + d <= nt) {
                let other = u.row(k + dk);
                let st = (dk as f64 * dt).sqrt();
                for &dj in &x_lags {
                    if dk == 0 && dj == 0 {
                        continue;
                    }
                    let denom = st + dj as f64 * dx;
                    for j in 0..nx {
                        if j + dj < nx {
                            worst = worst.max((row[j] - other[j + dj]).abs() / denom);
                        }
                        if dj > 0 && dk > 0 && j >= dj {
                            worst = worst.max((row[j] - other[j - dj]).abs() / denom);
                        }
                    }
                }
            }
            worst
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0, f64::max)
}

/// Hölder-type regularity `|u(t,x) − u(s,y)| ≤ L₁(√|t−s| + |x−y|)`; passes
/// iff the sampled ratio is at most `L₁(1 + tol)`.
pub fn check_lipschitz(u: &ValueSurface, l_phi: f64, l_h: f64, sup_h: f64, band: &VolatilityBand, tol: f64) -> VerifyReport {
    let l1 = holder_constant(l_phi, l_h, sup_h, band, u.time().horizon);
    VerifyReport::new("check_lipschitz", holder_ratio(u), l1, l1 * tol, u.grids().into())
        .with("l_phi", l_phi)
        .with("l_h", l_h)
        .with("sup_h", sup_h)
}

/// A source depending only on the time row.
struct RowSource<'a>(&'a (dyn Fn(usize, f64) -> f64 + Sync));

impl Driver for RowSource<'_> {
    fn f(&self, k: usize, t: f64, _: usize, _: f64, _: f64, _: f64) -> f64 {
        (self.0)(k, t)
    }
}

/// A source tabulated on the grid, `s[k·nx + j]`.
struct NodeSource<'a> {
    values: &'a [f64],
    nx: usize,
}

impl Driver for NodeSource<'_> {
    fn f(&self, k: usize, _: f64, j: usize, _: f64, _: f64, _: f64) -> f64 {
        self.values[k * self.nx + j]
    }
}

/// `max |lhs|^α / rhs` over interior nodes, skipping nodes where both sides
/// vanish. The two boundary columns follow the closure condition rather than
/// the equation (a driver still moves them while a driver-free bound stays
/// frozen there), so they are excluded.
fn worst_ratio(lhs: &[f64], rhs: &[f64], nx: usize, alpha: f64) -> f64 {
    let interior = |i: &usize| (1..nx - 1).contains(&(i % nx));
    lhs.iter().zip(rhs).enumerate().filter(|(i, _)| interior(i)).fold(0.0, |m: f64, (_, (&l, &r))| {
        let l = l.abs().powf(alpha);
        if l == 0.0 {
            m
        } else if r > 0.0 {
            m.max(l / r)
        } else {
            f64::INFINITY
        }
    })
}

/// `ρ = max_{k,j} |u|^α / V` where `V` is the G-expectation of
/// `|ξ|^α + ∫ₜᵀ |f⁰|^α ds` on the lattice.
pub fn estimate_y_ratio(payoff: &Payoff, gen: &Generator, band: &VolatilityBand, grids: &Grids, params: &VerifyParams) -> Result<f64> {
    params.check_alpha()?;
    let alpha = params.alpha;
    let u = solve_gheat(payoff, gen, band, grids)?;
    let terminal = grids.space.xs().iter().map(|&x| payoff.eval(x).abs().powf(alpha)).collect();
    let source = |_: usize, t: f64| params.f0(gen, t).powf(alpha);
    let v = if gen.has_f() || params.eps > 0.0 {
        solve_from_terminal(terminal, 0.0, grids, band, &RowSource(&source))?
    } else {
        solve_from_terminal(terminal, 0.0, grids, band, &NoDriver)?
    };
    Ok(worst_ratio(u.values(), v.values(), grids.nx(), alpha))
}

/// `|Y_t|^α ≤ C Ê_t[|ξ|^α + ∫ₜᵀ|f⁰|^α ds]`: the empirical constant must be
/// finite and must not grow by more than `rho_tol` under one refinement.
pub fn check_estimate_y(payoff: &Payoff, gen: &Generator, band: &VolatilityBand, grids: &Grids, params: &VerifyParams) -> Result<VerifyReport> {
    let fine = grids.refined(1);
    let coarse_rho = estimate_y_ratio(payoff, gen, band, grids, params)?;
    let fine_rho = estimate_y_ratio(payoff, gen, band, &fine, params)?;
    let measured = if !coarse_rho.is_finite() || !fine_rho.is_finite() {
        f64::INFINITY
    } else if coarse_rho == 0.0 {
        if fine_rho == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        fine_rho / coarse_rho
    };
    Ok(VerifyReport::new("check_estimate_Y", measured, 1.0, params.rho_tol, grids.into())
        .with("alpha", params.alpha)
        .with("rho", coarse_rho)
        .with("rho_refined", fine_rho))
}

/// Path functionals entering the `Z`/`K` estimates at one resolution.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct ZkSample {
    z: f64,
    k: f64,
    sup_y: f64,
}

fn zk_sample(tp: &TriplePath, time: &TimeGrid, alpha: f64, k_end: usize) -> ZkSample {
    let dt = time.dt();
    let zz: f64 = tp.z[..time.steps].iter().map(|z| z * z * dt).sum();
    ZkSample {
        z: zz.powf(alpha / 2.0),
        k: tp.k[k_end].abs().powf(alpha),
        sup_y: tp.y.iter().fold(0.0, |m: f64, y| m.max(y.abs())).powf(alpha),
    }
}

/// Empirical constants `(C_Z, C_K)` from sublinear means `(Ê_Z, Ê_K, Ê_S)`.
fn zk_constants(ez: f64, ek: f64, es: f64, f: f64) -> (f64, f64) {
    // numerators at rounding level are treated as exact zeros
    let quotient = |num: f64, den: f64| if num <= 1e-12 * den { 0.0 } else { num / den };
    (quotient(ez, es + es.sqrt() * f.sqrt()), quotient(ek, es + f))
}

fn relative_drift(coarse: f64, fine: f64) -> f64 {
    if coarse == fine {
        0.0
    } else if coarse == 0.0 || !coarse.is_finite() || !fine.is_finite() {
        f64::INFINITY
    } else {
        (fine / coarse - 1.0).abs()
    }
}

/// Both estimates on `Z` and `K`,
///
/// ```text
/// Ê[(∫|Z|²)^{α/2}] ≤ C{Ê[sup|Y|^α] + Ê[sup|Y|^α]^{1/2} Ê[(∫f⁰)^α]^{1/2}}
/// Ê[|K_T|^α]       ≤ C{Ê[sup|Y|^α] + Ê[(∫f⁰)^α]}
/// ```
///
/// with `Ê` the largest Monte Carlo mean over the sampled controls and the
/// bang-bang control. Paths are simulated on the refined grid and coarsened
/// for the reference grid, so both resolutions see the same increments.
/// Passes iff both constants drift by at most `drift_tol`.
pub fn check_estimate_zk(payoff: &Payoff, gen: &Generator, band: &VolatilityBand, grids: &Grids, params: &VerifyParams) -> Result<VerifyReport> {
    params.check_alpha()?;
    let fine = grids.refined(1);
    let factor = fine.nt() / grids.nt();
    let coarse_sol = solve_markovian(payoff, gen, band, grids)?;
    let fine_sol = solve_markovian(payoff, gen, band, &fine)?;
    let panels = normal_panels(params.seed, params.n_paths, fine.nt());
    let (ke_c, ke_f) = (params.k_end(grids.nt()), params.k_end(fine.nt()));

    let bb = BangBang { solution: &fine_sol, generator: gen, band: *band };
    let family = control_family(band, fine.nt(), params.controls, params.segments, params.seed);
    let mut policies: Vec<&dyn VolPolicy> = family.iter().map(|c| c as &dyn VolPolicy).collect();
    policies.push(&bb);

    let mut sup_c = [f64::NEG_INFINITY; 3];
    let mut sup_f = [f64::NEG_INFINITY; 3];
    for policy in policies {
        let rows = over_paths(policy, &panels, &fine.time, |p| {
            let cp = p.coarsen(factor);
            let tc = triple_path(&coarse_sol, &cp, &grids.time, gen, band);
            let tf = triple_path(&fine_sol, p, &fine.time, gen, band);
            (zk_sample(&tc, &grids.time, params.alpha, ke_c), zk_sample(&tf, &fine.time, params.alpha, ke_f))
        });
        let n = rows.len() as f64;
        let means = |pick: &dyn Fn(&(ZkSample, ZkSample)) -> f64| rows.iter().map(pick).sum::<f64>() / n;
        let mc = [means(&|r| r.0.z), means(&|r| r.0.k), means(&|r| r.0.sup_y)];
        let mf = [means(&|r| r.1.z), means(&|r| r.1.k), means(&|r| r.1.sup_y)];
        for i in 0..3 {
            sup_c[i] = sup_c[i].max(mc[i]);
            sup_f[i] = sup_f[i].max(mf[i]);
        }
    }
    let f_int = |time: &TimeGrid| {
        let dt = time.dt();
        (0..time.steps).map(|k| params.f0(gen, time.t(k)) * dt).sum::<f64>().powf(params.alpha)
    };
    let (cz_c, ck_c) = zk_constants(sup_c[0], sup_c[1], sup_c[2], f_int(&grids.time));
    let (cz_f, ck_f) = zk_constants(sup_f[0], sup_f[1], sup_f[2], f_int(&fine.time));
    let measured = relative_drift(cz_c, cz_f).max(relative_drift(ck_c, ck_f));
    Ok(VerifyReport::new("check_estimate_ZK", measured, params.drift_tol, 0.0, grids.into())
        .with("alpha", params.alpha)
        .with("c_z", cz_c)
        .with("c_z_refined", cz_f)
        .with("c_k", ck_c)
        .with("c_k_refined", ck_f)
        .with("paths", params.n_paths as f64))
}

/// Terminal data and generator of one problem in a stability comparison.
#[derive(Debug, Clone)]
pub struct StabilityCase {
    pub payoff: Payoff,
    pub generator: Generator,
}

/// `|Ŷ_t|^α ≤ C Ê_t[|ξ̂|^α + ∫ₜᵀ|f̂|^α ds]` for `Ŷ = Y¹ − Y²`, with `Y²` the
/// reference and `f̂ = |f¹ − f²|(s, Y², Z²) + L^w ε`.
///
/// Each perturbed case gives `‖Ŷ‖ = max|Ŷ|` and a right-side size
/// `s = (max rhs)^{1/α}`. Passes iff every empirical constant is finite and,
/// along the sequence, `‖Ŷ‖` shrinks at least in proportion to `s`:
/// `(‖Ŷ_{i+1}‖/‖Ŷ_i‖) / (s_{i+1}/s_i) ≤ 1 + scaling_tol`.
pub fn check_stability(
    reference: &StabilityCase,
    perturbed: &[StabilityCase],
    band: &VolatilityBand,
    grids: &Grids,
    params: &VerifyParams,
) -> Result<VerifyReport> {
    params.check_alpha()?;
    let alpha = params.alpha;
    let nx = grids.nx();
    let xs = grids.space.xs();
    let u2 = solve_gheat(&reference.payoff, &reference.generator, band, grids)?;
    let z2 = first_derivative(&u2);

    let mut sizes = Vec::with_capacity(perturbed.len());
    let mut worst_c: f64 = 0.0;
    for case in perturbed {
        let u1 = solve_gheat(&case.payoff, &case.generator, band, grids)?;
        let lw = params.lw.unwrap_or(case.generator.lipschitz());
        let mut source = vec![0.0; u2.values().len()];
        source.par_chunks_mut(nx).enumerate().for_each(|(k, row)| {
            let t = u2.t(k);
            for (j, s) in row.iter_mut().enumerate() {
                let (y, z) = (u2.value(k, j), z2.value(k, j));
                let d = (case.generator.f(t, y, z) - reference.generator.f(t, y, z)).abs();
                *s = (d + lw * params.eps).powf(alpha);
            }
        });
        let terminal = xs.iter().map(|&x| (case.payoff.eval(x) - reference.payoff.eval(x)).abs().powf(alpha)).collect();
        let rhs = solve_from_terminal(terminal, 0.0, grids, band, &NodeSource { values: &source, nx })?;
        let diff: Vec<f64> = u1.values().iter().zip(u2.values()).map(|(a, b)| a - b).collect();
        worst_c = worst_c.max(worst_ratio(&diff, rhs.values(), nx, alpha));
        let y_norm = diff.iter().fold(0.0, |m: f64, d| m.max(d.abs()));
        let s = rhs.values().iter().fold(0.0, |m: f64, &v| m.max(v)).powf(1.0 / alpha);
        sizes.push((y_norm, s));
    }
    let mut measured: f64 = if worst_c.is_finite() { 0.0 } else { f64::INFINITY };
    let mut report_details = Vec::new();
    for (i, w) in sizes.windows(2).enumerate() {
        let ((y0, s0), (y1, s1)) = (w[0], w[1]);
        let shrink = if y1 == 0.0 {
            0.0
        } else if y0 == 0.0 || s0 == 0.0 || s1 == 0.0 {
            f64::INFINITY
        } else {
            (y1 / y0) / (s1 / s0)
        };
        report_details.push((format!("shrink_{i}"), shrink));
        measured = measured.max(shrink);
    }
    let mut report = VerifyReport::new("check_stability", measured, 1.0, params.scaling_tol, grids.into())
        .with("alpha", alpha)
        .with("c_alpha", worst_c);
    for (i, (y, s)) in sizes.iter().enumerate() {
        report = report.with(&format!("y_norm_{i}"), *y).with(&format!("rhs_size_{i}"), *s);
    }
    for (k, v) in report_details {
        report = report.with(&k, v);
    }
    Ok(report)
}

/// Step integrand `X_k = tanh(B_{t_k})` of the composite check.
fn step_integrand(b: f64) -> f64 {
    b.tanh()
}

/// Composite `∫X⁺dK¹ + ∫X⁻dK²`, with `K¹`, `K²` the closed-form decreasing
/// martingales of `x²` and `−x²` (`∂²ₓₓu ≡ ±2`).
fn composite_k(path: &Path, time: &TimeGrid, band: &VolatilityBand, tally: &mut IncrementTally) -> f64 {
    let dt = time.dt();
    let mut k = 0.0;
    for step in 0..time.steps {
        let x = step_integrand(path.b[step]);
        let r = path.rate[step];
        let d1 = k_increment(2.0, r, dt, band);
        let d2 = k_increment(-2.0, r, dt, band);
        let d = x.max(0.0) * d1 + (-x).max(0.0) * d2;
        tally.increments += 1;
        tally.max = tally.max.max(d);
        if d == 0.0 {
            tally.zeros += 1;
        }
        k += d;
    }
    k
}

/// Chooses `σ̄` where the integrand is positive and `σ` where it is negative,
/// which makes the composite increments vanish.
struct CompositeBangBang(VolatilityBand);

impl VolPolicy for CompositeBangBang {
    fn rate(&self, k: usize, _t: f64, history: &[f64]) -> f64 {
        if step_integrand(history[k]) < 0.0 { self.0.var_lo() } else { self.0.var_hi() }
    }

    fn label(&self) -> String {
        "composite-bang-bang".into()
    }
}

/// Integrating nonnegative step processes against decreasing G-martingales
/// keeps both properties: the composite is tested for exact monotonicity and
/// for the two-sided martingale property.
pub fn check_composite_k(band: &VolatilityBand, grids: &Grids, params: &VerifyParams) -> VerifyReport {
    let time = grids.time;
    let panels = normal_panels(params.seed, params.n_paths, time.steps);
    let family = control_family(band, time.steps, params.controls, params.segments, params.seed);
    let bb = CompositeBangBang(*band);
    let mut policies: Vec<&dyn VolPolicy> = family.iter().map(|c| c as &dyn VolPolicy).collect();
    policies.push(&bb);
    let mut stats = Vec::with_capacity(policies.len());
    for policy in policies {
        let rows = over_paths(policy, &panels, &time, |p| {
            let mut tally = IncrementTally::default();
            let k = composite_k(p, &time, band, &mut tally);
            (k, tally, p.b[time.steps])
        });
        let ks: Vec<f64> = rows.iter().map(|r| r.0).collect();
        stats.push(KStats {
            label: policy.label(),
            k_end: McEstimate::from_samples(&ks),
            tally: rows.iter().fold(IncrementTally::default(), |t, r| t.merge(r.1)),
            b_terminal: Vec::new(),
        });
    }
    let tally = stats.iter().fold(IncrementTally::default(), |t, s| t.merge(s.tally));
    let report = martingale_report("check_composite_K", &stats, params.grid_tol, grids);
    // Monotonicity is exact: fold it into the measurement.
    let measured = report.measured.max(tally.max);
    VerifyReport::new("check_composite_K", measured, 0.0, 0.0, grids.into())
        .with("max_increment", tally.max)
        .with("martingale_slack", report.measured)
        .with("attaining_mean", report.details["attaining_mean"])
}

/// The problem a verification suite runs on.
#[derive(Debug, Clone)]
pub struct SuiteProblem {
    pub payoff: Payoff,
    pub generator: Generator,
    pub band: VolatilityBand,
    pub grids: Grids,
}

pub const CHECK_NAMES: [&str; 7] = [
    "check_composite_K",
    "check_decreasing",
    "check_estimate_Y",
    "check_estimate_ZK",
    "check_lipschitz",
    "check_martingale_K",
    "check_stability",
];

/// Accepts full names or names without the `check_` prefix, case-insensitive.
pub fn resolve_check(name: &str) -> Option<&'static str> {
    let key = name.trim().to_ascii_lowercase();
    let key = key.strip_prefix("check_").unwrap_or(&key);
    CHECK_NAMES.iter().copied().find(|c| c.to_ascii_lowercase().strip_prefix("check_") == Some(key))
}

/// The suite's stability family: `f + ε·tanh(y)` for each configured `ε`.
pub fn perturbation_family(payoff: &Payoff, gen: &Generator, sizes: &[f64]) -> Vec<StabilityCase> {
    sizes
        .iter()
        .map(|&eps| {
            let base = gen.clone();
            let f: GeneratorFn = std::sync::Arc::new(move |t, y, z| base.f(t, y, z) + eps * y.tanh());
            let mut g = Generator::new(f, gen.lipschitz() + eps.abs()).with_label(format!("{} + {eps}·tanh(y)", gen.label()));
            if gen.has_g() {
                let base = gen.clone();
                g = g.with_g(std::sync::Arc::new(move |t, y, z| base.g(t, y, z)));
            }
            g
        })
        .map(|generator| StabilityCase { payoff: payoff.clone(), generator })
        .collect()
}

/// Runs the named checks (all of them for `"all"`), returning reports sorted
/// by check name.
pub fn run_suite(problem: &SuiteProblem, names: &[String], params: &VerifyParams) -> Result<Vec<VerifyReport>> {
    let mut wanted: Vec<&'static str> = Vec::new();
    for n in names {
        if n.trim().eq_ignore_ascii_case("all") {
            wanted.extend(CHECK_NAMES);
        } else {
            wanted.push(resolve_check(n).ok_or_else(|| Error::Domain(format!("unknown check `{n}`")))?);
        }
    }
    wanted.sort_unstable();
    wanted.dedup();

    let SuiteProblem { payoff, generator: gen, band, grids } = problem;
    let needs_solution = wanted.iter().any(|n| matches!(*n, "check_decreasing" | "check_martingale_K" | "check_lipschitz"));
    let solution = if needs_solution { Some(solve_markovian(payoff, gen, band, grids)?) } else { None };
    let k_stats = if wanted.iter().any(|n| matches!(*n, "check_decreasing" | "check_martingale_K")) {
        Some(family_k_stats(solution.as_ref().unwrap(), gen, band, params))
    } else {
        None
    };

    let mut out = Vec::with_capacity(wanted.len());
    for name in wanted {
        let report = match name {
            "check_composite_K" => check_composite_k(band, grids, params),
            "check_decreasing" => {
                let tally = k_stats.as_ref().unwrap().iter().fold(IncrementTally::default(), |t, s| t.merge(s.tally));
                decreasing_report(&tally, grids)
            }
            "check_estimate_Y" => check_estimate_y(payoff, gen, band, grids, params)?,
            "check_estimate_ZK" => check_estimate_zk(payoff, gen, band, grids, params)?,
            "check_lipschitz" => {
                let u = &solution.as_ref().unwrap().u;
                let l_phi = match payoff.lipschitz() {
                    l if l.is_finite() => l,
                    _ => payoff.lipschitz_on(grids.space.lo, grids.space.hi),
                };
                let sup_h = realized_generator_sup(u, gen);
                check_lipschitz(u, l_phi, gen.lipschitz(), sup_h, band, params.lipschitz_tol)
            }
            "check_martingale_K" => martingale_report("check_martingale_K", k_stats.as_ref().unwrap(), params.grid_tol, grids)
                .with("kappa_steps", params.kappa_steps as f64),
            "check_stability" => {
                let reference = StabilityCase { payoff: payoff.clone(), generator: gen.clone() };
                let cases = perturbation_family(payoff, gen, &params.perturbations);
                check_stability(&reference, &cases, band, grids, params)?
            }
            _ => unreachable!("resolved names are known"),
        };
        out.push(report);
    }
    Ok(out)
}
