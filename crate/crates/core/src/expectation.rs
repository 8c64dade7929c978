//! Sublinear expectations of functionals of finitely many increments of `B`.
//!
//! Two routes are provided and checked against each other:
//!
//! * the lattice route, which integrates out the increments one at a time,
//!   last first, by solving the `f = g = 0` G-heat equation once per frozen
//!   tuple of earlier increments;
//! * the dual route, which averages the functional over paths of
//!   `X_t = ∫ h dW` for volatility controls `h ∈ [σ, σ̄]`. Each such mean is a
//!   lower bound of the G-expectation, and the supremum over controls
//!   recovers it.
//!
//! Standard normals are drawn by inverse CDF from a ChaCha8 stream keyed by
//! `(seed, path)` and read in step order, so every path can be regenerated
//! on its own and the results do not depend on scheduling.

use std::fmt;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{Grids, Payoff, SpaceGrid, TimeGrid, VolatilityBand};
use crate::pde::{solve_initial_row, NoDriver};

/// Largest number of increments the lattice evaluator accepts.
pub const MAX_INCREMENTS: usize = 3;

/// Cap on `Σ (frozen tuples × space nodes × time steps)` for one lattice evaluation.
pub const LATTICE_WORK_BUDGET: f64 = 2.0e10;

/// Piecewise-constant volatility `h_k` applied on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolControl {
    values: Vec<f64>,
}

impl VolControl {
    pub fn new(values: Vec<f64>, band: &VolatilityBand) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("a control needs at least one step".into()));
        }
        if let Some((k, h)) = values
            .iter()
            .enumerate()
            .find(|(_, &h)| !(h >= band.sigma_lo() && h <= band.sigma_hi()))
        {
            return Err(Error::Domain(format!(
                "control value {h} at step {k} outside [{}, {}]",
                band.sigma_lo(),
                band.sigma_hi()
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(h: f64, steps: usize, band: &VolatilityBand) -> Result<Self> {
        Self::new(vec![h; steps], band)
    }

    pub fn lower(steps: usize, band: &VolatilityBand) -> Self {
        Self { values: vec![band.sigma_lo(); steps] }
    }

    pub fn upper(steps: usize, band: &VolatilityBand) -> Self {
        Self { values: vec![band.sigma_hi(); steps] }
    }

    /// `segments` equal blocks with volatilities uniform in the band, drawn
    /// from a stream keyed by `(seed, index)`.
    pub fn random(band: &VolatilityBand, steps: usize, segments: usize, seed: u64, index: u64) -> Self {
        let segments = segments.clamp(1, steps.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CONTROL_STREAM_KEY);
        rng.set_stream(index);
        let levels: Vec<f64> = (0..segments)
            .map(|_| band.sigma_lo() + (band.sigma_hi() - band.sigma_lo()) * unit_uniform(rng.next_u64()))
            .map(|h| h.clamp(band.sigma_lo(), band.sigma_hi()))
            .collect();
        let values = (0..steps).map(|k| levels[k * segments / steps]).collect();
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn steps(&self) -> usize {
        self.values.len()
    }
}

const CONTROL_STREAM_KEY: u64 = 0xC0A7_B0D5_1E55_5EED;

/// A (possibly path-dependent) variance-rate policy `h_k²`.
///
/// Rates must lie in `[σ², σ̄²]`; they are used as given for both the
/// quadratic-variation increment and the Brownian increment.
pub trait VolPolicy: Sync {
    /// Variance rate on `[t_k, t_{k+1})` given `B_0, …, B_k`.
    fn rate(&self, k: usize, t: f64, history: &[f64]) -> f64;

    fn label(&self) -> String;

    /// The open-loop control, when the policy is one.
    fn open_loop(&self) -> Option<&VolControl> {
        None
    }
}

impl VolPolicy for VolControl {
    #[inline]
    fn rate(&self, k: usize, _t: f64, _history: &[f64]) -> f64 {
        let h = self.values[k];
        h * h
    }

    fn label(&self) -> String {
        match self.values.first() {
            Some(&h0) if self.values.iter().all(|&h| h == h0) => format!("const({h0})"),
            _ => "piecewise".into(),
        }
    }

    fn open_loop(&self) -> Option<&VolControl> {
        Some(self)
    }
}

/// Maps 64 random bits to the open interval `(0, 1)`.
#[inline]
fn unit_uniform(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normals for one path: entry `k` is the inverse CDF of the `k`-th
/// 64-bit word of the stream `(seed, path)`.
pub fn normal_panel(seed: u64, path: u64, steps: usize) -> Vec<f64> {
    let normal = Normal::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    (0..steps).map(|_| normal.inverse_cdf(unit_uniform(rng.next_u64()))).collect()
}

/// One simulated path with nodes `0..=nt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// `B_{t_k}`.
    pub b: Vec<f64>,
    /// `⟨B⟩_{t_k}`.
    pub qv: Vec<f64>,
    /// Variance rate on each step; `qv[k+1] = qv[k] + rate[k]·Δt`.
    pub rate: Vec<f64>,
}

impl Path {
    pub fn steps(&self) -> usize {
        self.rate.len()
    }

    /// Keeps every `factor`-th node; the coarse rate is the mean of the fine
    /// rates it covers, so `qv` stays consistent.
    pub fn coarsen(&self, factor: usize) -> Path {
        Path {
            b: self.b.iter().step_by(factor).copied().collect(),
            qv: self.qv.iter().step_by(factor).copied().collect(),
            rate: self.rate.chunks_exact(factor).map(|c| c.iter().sum::<f64>() / factor as f64).collect(),
        }
    }
}

/// Euler path of `dB = √rate dW` driven by the given standard normals.
pub fn simulate_path<P: VolPolicy + ?Sized>(policy: &P, normals: &[f64], time: &TimeGrid) -> Path {
    let nt = time.steps;
    let dt = time.dt();
    let mut b = Vec::with_capacity(nt + 1);
    let mut qv = Vec::with_capacity(nt + 1);
    let mut rate = Vec::with_capacity(nt);
    b.push(0.0);
    qv.push(0.0);
    for k in 0..nt {
        let r = policy.rate(k, time.t(k), &b);
        rate.push(r);
        b.push(b[k] + (r * dt).sqrt() * normals[k]);
        qv.push(qv[k] + r * dt);
    }
    Path { b, qv, rate }
}

/// Terminal value `B_T` only, for open-loop controls.
fn terminal_only(control: &VolControl, normals: &[f64], dt: f64) -> f64 {
    control.values.iter().zip(normals).map(|(&h, &n)| (h * h * dt).sqrt() * n).sum()
}

/// Which control generated a bundle.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlTag {
    Open(VolControl),
    Adaptive(String),
}

/// Simulated paths sharing one time grid and one control.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub time: TimeGrid,
    pub seed: u64,
    pub control: ControlTag,
    pub paths: Vec<Path>,
}

impl PathBundle {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Keeps every `factor`-th node. Increments aggregate exactly; the
    /// coarse rate is the mean of the fine rates it covers.
    pub fn coarsen(&self, factor: usize) -> Result<PathBundle> {
        if factor == 0 || !self.time.steps.is_multiple_of(factor) {
            return Err(Error::GridMismatch(format!(
                "cannot coarsen {} steps by a factor of {factor}",
                self.time.steps
            )));
        }
        let time = TimeGrid::new(self.time.horizon, self.time.steps / factor)?;
        let paths = self.paths.iter().map(|p| p.coarsen(factor)).collect();
        let control = match &self.control {
            ControlTag::Open(c) => ControlTag::Open(VolControl {
                values: c
                    .values
                    .chunks_exact(factor)
                    .map(|c| (c.iter().map(|h| h * h).sum::<f64>() / factor as f64).sqrt())
                    .collect(),
            }),
            ControlTag::Adaptive(s) => ControlTag::Adaptive(format!("{s}/coarse{factor}")),
        };
        Ok(PathBundle { time, seed: self.seed, control, paths })
    }
}

/// Runs `f(path_index, normals)` for every path, in parallel, returning the
/// results in path order.
pub fn map_paths<R, F>(n_paths: usize, seed: u64, steps: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, &[f64]) -> R + Sync,
{
    (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let normals = normal_panel(seed, p as u64, steps);
            f(p, &normals)
        })
        .collect()
}

/// Simulates `n_paths` paths under `policy`.
pub fn simulate_paths<P: VolPolicy + ?Sized>(policy: &P, n_paths: usize, seed: u64, time: &TimeGrid) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be at least 1".into()));
    }
    if let Some(c) = policy.open_loop() {
        if c.steps() != time.steps {
            return Err(Error::GridMismatch(format!("control has {} steps, grid has {}", c.steps(), time.steps)));
        }
    }
    let paths = map_paths(n_paths, seed, time.steps, |_, normals| simulate_path(policy, normals, time));
    let control = match policy.open_loop() {
        Some(c) => ControlTag::Open(c.clone()),
        None => ControlTag::Adaptive(policy.label()),
    };
    Ok(PathBundle { time: *time, seed, control, paths })
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, n };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }

    /// `mean − 3·stderr`.
    pub fn lower(&self) -> f64 {
        self.mean - 3.0 * self.stderr
    }

    /// `mean + 3·stderr`.
    pub fn upper(&self) -> f64 {
        self.mean + 3.0 * self.stderr
    }
}

pub type IncrementFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `φ(B_{t₁} − B_{t₀}, …, B_{t_m} − B_{t_{m−1}})` with `t₀ = 0`.
#[derive(Clone)]
pub struct IncrementPayoff {
    times: Vec<f64>,
    phi: IncrementFn,
}

impl fmt::Debug for IncrementPayoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IncrementPayoff").field("times", &self.times).finish()
    }
}

impl IncrementPayoff {
    /// `times` lists `t₁ < … < t_m`; `t₀ = 0` is implicit.
    pub fn new(times: Vec<f64>, phi: IncrementFn) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Domain("need at least one increment".into()));
        }
        let mut all = Vec::with_capacity(times.len() + 1);
        all.push(0.0);
        all.extend(times);
        if !all.iter().all(|t| t.is_finite()) || all.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(format!("increment times must be strictly increasing from 0: {all:?}")));
        }
        Ok(Self { times: all, phi })
    }

    /// `φ(B_T)` as a single-increment functional.
    pub fn terminal(payoff: Payoff, horizon: f64) -> Result<Self> {
        Self::new(vec![horizon], Arc::new(move |d: &[f64]| payoff.eval(d[0])))
    }

    pub fn increments(&self) -> usize {
        self.times.len() - 1
    }

    /// `0 = t₀ < t₁ < … < t_m`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    #[inline]
    pub fn eval(&self, increments: &[f64]) -> f64 {
        (self.phi)(increments)
    }

    fn node_indices(&self, time: &TimeGrid) -> Result<Vec<usize>> {
        if (time.horizon - self.horizon()).abs() > 1e-12 * time.horizon.max(1.0) {
            return Err(Error::GridMismatch(format!(
                "payoff horizon {} differs from grid horizon {}",
                self.horizon(),
                time.horizon
            )));
        }
        self.times
            .iter()
            .map(|&t| {
                time.node_of(t)
                    .ok_or_else(|| Error::GridMismatch(format!("observation time {t} is not a node of the time grid")))
            })
            .collect()
    }

    fn eval_on_path(&self, nodes: &[usize], b: &[f64], buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        buf.extend(nodes.windows(2).map(|w| b[w[1]] - b[w[0]]));
        self.eval(buf)
    }
}

/// Nodal values of a function of `dims` increments on the tensor grid
/// `space^dims`, last coordinate fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    space: SpaceGrid,
    dims: usize,
    values: Vec<f64>,
}

impl Table {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn space(&self) -> &SpaceGrid {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at a node multi-index.
    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.dims);
        let flat = idx.iter().fold(0usize, |acc, &i| acc * self.space.nodes + i);
        self.values[flat]
    }

    /// Multilinear interpolation, clamped to the domain.
    pub fn eval(&self, point: &[f64]) -> f64 {
        assert_eq!(point.len(), self.dims);
        let cells: Vec<(usize, f64)> = point.iter().map(|&x| self.space.locate(x)).collect();
        let mut acc = 0.0;
        for corner in 0..(1usize << self.dims) {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for (d, &(j, w)) in cells.iter().enumerate() {
                let upper = corner >> (self.dims - 1 - d) & 1 == 1;
                weight *= if upper { w } else { 1.0 - w };
                flat = flat * self.space.nodes + j + upper as usize;
            }
            if weight != 0.0 {
                acc += weight * self.values[flat];
            }
        }
        acc
    }
}

fn interval_grids(len: f64, grids: &Grids) -> Result<Grids> {
    let steps = ((len / grids.time.dt()) - 1e-9).ceil().max(1.0) as usize;
    Ok(Grids { time: TimeGrid::new(len, steps)?, space: grids.space })
}

/// The conditional expectation `φ̃(x₁, …, x_i) = Ê[φ(x₁, …, x_i, ΔB_{i+1}, …, ΔB_m)]`
/// tabulated on the tensor grid. `i = m` returns `φ` itself, `i = 0` the
/// scalar G-expectation as a zero-dimensional table.
pub fn conditional_g_expectation(
    payoff: &IncrementPayoff,
    i: usize,
    band: &VolatilityBand,
    grids: &Grids,
) -> Result<Table> {
    let m = payoff.increments();
    if m > MAX_INCREMENTS {
        return Err(Error::Budget(format!("{m} increments exceed the lattice limit of {MAX_INCREMENTS}")));
    }
    if i > m {
        return Err(Error::Domain(format!("conditioning index {i} exceeds increment count {m}")));
    }
    let ratio = grids.cfl_ratio(band);
    if ratio > crate::model::CFL_LIMIT {
        return Err(Error::Cfl { ratio });
    }
    let space = grids.space;
    let nx = space.nodes;
    let times = payoff.times();

    let mut work = 0.0;
    for level in (i + 1..=m).rev() {
        let g = interval_grids(times[level] - times[level - 1], grids)?;
        work += (nx as f64).powi(level as i32) * g.nt() as f64;
    }
    if work > LATTICE_WORK_BUDGET {
        return Err(Error::Budget(format!("lattice work {work:.3e} exceeds {LATTICE_WORK_BUDGET:.1e} node-steps")));
    }

    let xs = space.xs();
    let total = nx.pow(m as u32);
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map_init(
            || vec![0.0; m],
            |point, flat| {
                let mut rest = flat;
                for d in (0..m).rev() {
                    point[d] = xs[rest % nx];
                    rest /= nx;
                }
                payoff.eval(point)
            },
        )
        .collect();
    let mut table = Table { space, dims: m, values };

    for level in (i + 1..=m).rev() {
        let sub = interval_grids(times[level] - times[level - 1], grids)?;
        let t0 = times[level - 1];
        let reduced: Result<Vec<f64>> = table
            .values
            .par_chunks(nx)
            .map(|row| {
                let init = solve_initial_row(row.to_vec(), t0, &sub, band, &NoDriver)?;
                Ok(space.interpolate(&init, 0.0))
            })
            .collect();
        table = Table { space, dims: level - 1, values: reduced? };
    }
    Ok(table)
}

/// `Ê[φ(ΔB₁, …, ΔB_m)]` by backward recursion over the increments.
pub fn g_expectation(payoff: &IncrementPayoff, band: &VolatilityBand, grids: &Grids) -> Result<f64> {
    Ok(conditional_g_expectation(payoff, 0, band, grids)?.values[0])
}

/// Sample mean of the payoff over a bundle generated by `control`. Each
/// such mean estimates `E_P[ξ] ≤ Ê[ξ]` for the control's measure.
pub fn mc_bound(payoff: &IncrementPayoff, control: &VolControl, bundle: &PathBundle) -> Result<McEstimate> {
    match &bundle.control {
        ControlTag::Open(c) if c == control => {}
        _ => return Err(Error::ControlMismatch("bundle was not generated under the given control".into())),
    }
    mc_estimate(payoff, bundle)
}

/// Sample mean of the payoff over any bundle.
pub fn mc_estimate(payoff: &IncrementPayoff, bundle: &PathBundle) -> Result<McEstimate> {
    let nodes = payoff.node_indices(&bundle.time)?;
    let mut buf = Vec::with_capacity(nodes.len());
    let samples: Vec<f64> = bundle.paths.iter().map(|p| payoff.eval_on_path(&nodes, &p.b, &mut buf)).collect();
    Ok(McEstimate::from_samples(&samples))
}

/// Candidate controls for [`sup_over_controls`].
#[derive(Debug, Clone)]
pub enum Candidates {
    Explicit(Vec<VolControl>),
    /// `budget` controls from [`VolControl::random`] with the given segment count.
    Random { budget: usize, segments: usize },
}

#[derive(Debug, Clone)]
pub struct SupResult {
    pub best_index: usize,
    pub best_control: VolControl,
    pub best: McEstimate,
    pub estimates: Vec<McEstimate>,
}

/// Largest Monte Carlo mean over a family of controls, all driven by the
/// same normal panel (common random numbers).
pub fn sup_over_controls(
    payoff: &IncrementPayoff,
    candidates: &Candidates,
    band: &VolatilityBand,
    time: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<SupResult> {
    let controls = match candidates {
        Candidates::Explicit(list) => list.clone(),
        Candidates::Random { budget, segments } => (0..*budget as u64)
            .map(|i| VolControl::random(band, time.steps, *segments, seed, i))
            .collect(),
    };
    if controls.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if n_paths == 0 {
        return Err(Error::Domain("n_paths must be at least 1".into()));
    }
    if let Some(c) = controls.iter().find(|c| c.steps() != time.steps) {
        return Err(Error::GridMismatch(format!("control has {} steps, grid has {}", c.steps(), time.steps)));
    }
    let nodes = payoff.node_indices(time)?;
    let dt = time.dt();
    let single = nodes.len() == 2 && nodes[0] == 0 && nodes[1] == time.steps;

    let per_path: Vec<Vec<f64>> = map_paths(n_paths, seed, time.steps, |_, normals| {
        let mut buf = Vec::with_capacity(nodes.len());
        controls
            .iter()
            .map(|c| {
                if single {
                    payoff.eval(&[terminal_only(c, normals, dt)])
                } else {
                    let path = simulate_path(c, normals, time);
                    payoff.eval_on_path(&nodes, &path.b, &mut buf)
                }
            })
            .collect()
    });

    let estimates: Vec<McEstimate> = (0..controls.len())
        .map(|i| McEstimate::from_samples(&per_path.iter().map(|v| v[i]).collect::<Vec<_>>()))
        .collect();
    let best_index = estimates
        .iter()
        .enumerate()
        .fold(0, |best, (i, e)| if e.mean > estimates[best].mean { i } else { best });
    Ok(SupResult { best_index, best_control: controls[best_index].clone(), best: estimates[best_index], estimates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band() -> VolatilityBand {
        VolatilityBand::new(0.5, 1.0).unwrap()
    }

    fn grids(nx: usize) -> Grids {
        Grids::for_band(&band(), 1.0, nx, 6.0, None).unwrap()
    }

    fn inc(times: Vec<f64>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> IncrementPayoff {
        IncrementPayoff::new(times, Arc::new(f)).unwrap()
    }

    #[test]
    fn single_increment_moments() {
        let g = grids(201);
        assert!(g_expectation(&inc(vec![1.0], |d| d[0]), &band(), &g).unwrap().abs() < 1e-12);
        let sq = g_expectation(&inc(vec![1.0], |d| d[0] * d[0]), &band(), &g).unwrap();
        assert!((sq - 1.0).abs() < 1e-9, "{sq}");
    }

    #[test]
    fn two_increment_sum_of_squares() {
        let g = grids(81);
        let v = g_expectation(&inc(vec![0.5, 1.0], |d| d[0] * d[0] + d[1] * d[1]), &band(), &g).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn conditional_tables() {
        let g = grids(81);
        let p = inc(vec![0.5, 1.0], |d| (d[0] + d[1]).powi(2));
        let top = conditional_g_expectation(&p, 2, &band(), &g).unwrap();
        assert_eq!(top.dims(), 2);
        assert_eq!(top.get(&[10, 20]), (g.space.x(10) + g.space.x(20)).powi(2));
        let mid = conditional_g_expectation(&p, 1, &band(), &g).unwrap();
        for j in 20..60 {
            let x = g.space.x(j);
            assert!((mid.get(&[j]) - (x * x + 0.5)).abs() < 1e-8);
        }
        assert!((mid.eval(&[0.123]) - (0.123f64.powi(2) + 0.5)).abs() < g.space.dx().powi(2));

        let c = inc(vec![0.3, 1.0], |_| 2.5);
        for i in 0..=2 {
            let t = conditional_g_expectation(&c, i, &band(), &g).unwrap();
            assert!(t.values().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn lattice_limits() {
        let g = grids(41);
        let four = inc(vec![0.25, 0.5, 0.75, 1.0], |d| d.iter().sum());
        assert!(matches!(g_expectation(&four, &band(), &g), Err(Error::Budget(_))));
        let big = grids(401);
        let three = inc(vec![0.25, 0.5, 1.0], |d| d.iter().sum());
        assert!(matches!(g_expectation(&three, &band(), &big), Err(Error::Budget(_))));
        assert!(IncrementPayoff::new(vec![0.5, 0.5], Arc::new(|_| 0.0)).is_err());
    }

    #[test]
    fn three_increments_on_small_grid() {
        let g = grids(41);
        let p = inc(vec![0.25, 0.5, 1.0], |d| d[0] * d[0] - d[1] * d[1] + d[2] * d[2]);
        // σ̄²·0.25 − σ²·0.25 + σ̄²·0.5
        let v = g_expectation(&p, &band(), &g).unwrap();
        assert!((v - (0.25 - 0.0625 + 0.5)).abs() < 1e-8, "{v}");
    }

    #[test]
    fn constant_control_quadratic_variation() {
        let g = grids(41);
        let up = VolControl::upper(g.nt(), &band());
        let bundle = simulate_paths(&up, 50, 7, &g.time).unwrap();
        for p in &bundle.paths {
            assert_eq!(p.b[0], 0.0);
            assert_eq!(p.qv[0], 0.0);
            assert!((p.qv[g.nt()] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bundles_are_reproducible_and_paths_independent_of_count() {
        let g = grids(41);
        let c = VolControl::random(&band(), g.nt(), 5, 3, 0);
        let a = simulate_paths(&c, 20, 11, &g.time).unwrap();
        let b = simulate_paths(&c, 20, 11, &g.time).unwrap();
        assert_eq!(a, b);
        let fewer = simulate_paths(&c, 5, 11, &g.time).unwrap();
        assert_eq!(fewer.paths[..], a.paths[..5]);
        let other = simulate_paths(&c, 5, 12, &g.time).unwrap();
        assert_ne!(other.paths[0], a.paths[0]);
    }

    #[test]
    fn second_moment_clt_band() {
        let time = TimeGrid::new(1.0, 16).unwrap();
        let up = VolControl::upper(16, &band());
        let bundle = simulate_paths(&up, 100_000, 2024, &time).unwrap();
        let est = mc_estimate(&IncrementPayoff::terminal(Payoff::square(1.0), 1.0).unwrap(), &bundle).unwrap();
        assert!((est.mean - 1.0).abs() <= 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn mc_bound_cases() {
        let time = TimeGrid::new(1.0, 32).unwrap();
        let lo = VolControl::lower(32, &band());
        let bundle = simulate_paths(&lo, 20_000, 5, &time).unwrap();
        let c = mc_bound(&IncrementPayoff::terminal(Payoff::constant(1.5), 1.0).unwrap(), &lo, &bundle).unwrap();
        assert_eq!((c.mean, c.stderr), (1.5, 0.0));
        let sq = mc_bound(&IncrementPayoff::terminal(Payoff::square(1.0), 1.0).unwrap(), &lo, &bundle).unwrap();
        assert!((sq.mean - 0.25).abs() <= 3.0 * sq.stderr);
        assert!(sq.upper() < 1.0);
        let neg = mc_bound(&IncrementPayoff::terminal(Payoff::square(-1.0), 1.0).unwrap(), &lo, &bundle).unwrap();
        assert!((neg.mean + 0.25).abs() <= 3.0 * neg.stderr);
        let up = VolControl::upper(32, &band());
        assert!(matches!(
            mc_bound(&IncrementPayoff::terminal(Payoff::square(1.0), 1.0).unwrap(), &up, &bundle),
            Err(Error::ControlMismatch(_))
        ));
    }

    #[test]
    fn sup_picks_the_extreme_control() {
        let time = TimeGrid::new(1.0, 20).unwrap();
        let cands = Candidates::Explicit(vec![VolControl::lower(20, &band()), VolControl::upper(20, &band())]);
        let sq = IncrementPayoff::terminal(Payoff::square(1.0), 1.0).unwrap();
        let r = sup_over_controls(&sq, &cands, &band(), &time, 5000, 1).unwrap();
        assert_eq!(r.best_index, 1);
        assert!((r.best.mean - 1.0).abs() < 3.0 * r.best.stderr);
        let neg = IncrementPayoff::terminal(Payoff::square(-1.0), 1.0).unwrap();
        assert_eq!(sup_over_controls(&neg, &cands, &band(), &time, 5000, 1).unwrap().best_index, 0);

        let one = Candidates::Explicit(vec![VolControl::lower(20, &band())]);
        let r = sup_over_controls(&sq, &one, &band(), &time, 300, 9).unwrap();
        let bundle = simulate_paths(&VolControl::lower(20, &band()), 300, 9, &time).unwrap();
        let direct = mc_bound(&sq, &VolControl::lower(20, &band()), &bundle).unwrap();
        assert_eq!(r.best_index, 0);
        assert!((r.best.mean - direct.mean).abs() < 1e-12);

        assert!(matches!(
            sup_over_controls(&sq, &Candidates::Explicit(vec![]), &band(), &time, 10, 1),
            Err(Error::EmptyCandidates)
        ));
    }

    #[test]
    fn coarsening_aggregates_increments() {
        let time = TimeGrid::new(1.0, 40).unwrap();
        let c = VolControl::random(&band(), 40, 7, 1, 2);
        let fine = simulate_paths(&c, 4, 3, &time).unwrap();
        let coarse = fine.coarsen(4).unwrap();
        assert_eq!(coarse.time.steps, 10);
        for (f, c) in fine.paths.iter().zip(&coarse.paths) {
            assert_eq!(c.b[3], f.b[12]);
            assert!((c.qv[10] - f.qv[40]).abs() < 1e-12);
            assert!(c.rate.iter().all(|&r| band().contains_rate(r)));
        }
        assert!(fine.coarsen(3).is_err());
    }
}
