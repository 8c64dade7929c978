//! Problem data shared by every solver: the volatility band and its G function,
//! the discretization grids, terminal payoffs and BSDE generators.
//!
//! In one dimension the sublinear generator is
//!
//! ```text
//! G(a) = ½ (σ̄² a⁺ − σ² a⁻) = ½ sup_{γ ∈ [σ², σ̄²]} γ a
//! ```
//!
//! and every monotonicity argument in the crate relies on evaluating it through
//! [`VolatilityBand::gamma_argmax`], so that `½ γ*(a) a` and `G(a)` agree bitwise.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The uncertainty interval `[sigma_lo, sigma_hi]` for the volatility of `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolatilityBand {
    sigma_lo: f64,
    sigma_hi: f64,
}

impl VolatilityBand {
    pub fn new(sigma_lo: f64, sigma_hi: f64) -> Result<Self> {
        if !(sigma_lo.is_finite() && sigma_hi.is_finite()) || sigma_lo <= 0.0 || sigma_lo > sigma_hi {
            return Err(Error::Domain(format!(
                "volatility band requires 0 < sigma_lo <= sigma_hi, got ({sigma_lo}, {sigma_hi})"
            )));
        }
        Ok(Self { sigma_lo, sigma_hi })
    }

    pub fn sigma_lo(&self) -> f64 {
        self.sigma_lo
    }

    pub fn sigma_hi(&self) -> f64 {
        self.sigma_hi
    }

    /// Lower variance rate `σ²`.
    #[inline]
    pub fn var_lo(&self) -> f64 {
        self.sigma_lo * self.sigma_lo
    }

    /// Upper variance rate `σ̄²`.
    #[inline]
    pub fn var_hi(&self) -> f64 {
        self.sigma_hi * self.sigma_hi
    }

    /// `G(a) = ½(σ̄²a⁺ − σ²a⁻)`.
    #[inline]
    pub fn g(&self, a: f64) -> f64 {
        if a == 0.0 {
            0.0
        } else {
            0.5 * self.gamma_argmax(a) * a
        }
    }

    /// Variance rate attaining `sup_γ ½γa`; ties at `a = 0` go to `σ̄²`.
    #[inline]
    pub fn gamma_argmax(&self, a: f64) -> f64 {
        if a < 0.0 {
            self.var_lo()
        } else {
            self.var_hi()
        }
    }

    /// Whether a variance rate lies inside `[σ², σ̄²]`.
    pub fn contains_rate(&self, rate: f64) -> bool {
        rate >= self.var_lo() && rate <= self.var_hi()
    }
}

/// Free-function form of [`VolatilityBand::g`].
pub fn g_function(a: f64, band: &VolatilityBand) -> f64 {
    band.g(a)
}

/// Free-function form of [`VolatilityBand::gamma_argmax`].
pub fn gamma_argmax(a: f64, band: &VolatilityBand) -> f64 {
    band.gamma_argmax(a)
}

/// Uniform time nodes `t_k = T k / nt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Domain("time-step count must be at least 1".into()));
        }
        Ok(Self { horizon, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    /// Nearest node index to `t`, if `t` lies on the grid up to rounding.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt()).round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.t(k) - t).abs() <= 1e-9 * self.horizon.max(1.0)).then_some(k)
    }
}

/// Uniform space nodes on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl SpaceGrid {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        if nodes < 3 {
            return Err(Error::Domain(format!("need at least 3 space nodes, got {nodes}")));
        }
        if !(lo < 0.0 && 0.0 < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Domain(format!("space bounds must satisfy lo < 0 < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi, nodes })
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        if j == self.nodes - 1 {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * j as f64 / (self.nodes - 1) as f64
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nodes).map(|j| self.x(j)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Cell index and linear weight of `x`, clamped to the domain.
    ///
    /// Returns `(j, w)` with `0 <= j <= nodes - 2` and `w ∈ [0, 1]` so that
    /// `x ≈ (1 − w) x_j + w x_{j+1}`.
    #[inline]
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let dx = self.dx();
        let s = ((x - self.lo) / dx).clamp(0.0, (self.nodes - 1) as f64);
        let j = (s.floor() as usize).min(self.nodes - 2);
        (j, (s - j as f64).clamp(0.0, 1.0))
    }

    /// Index of the node nearest `x`, ties to the right (cells `[x_j − dx/2, x_j + dx/2)`).
    pub fn nearest(&self, x: f64) -> usize {
        let s = ((x - self.lo) / self.dx() + 0.5).floor();
        s.clamp(0.0, (self.nodes - 1) as f64) as usize
    }

    /// Linear interpolation of nodal values, clamped at the boundary.
    #[inline]
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (j, w) = self.locate(x);
        if w == 0.0 {
            values[j]
        } else {
            (1.0 - w) * values[j] + w * values[j + 1]
        }
    }
}

/// Time and space grids for the explicit scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub time: TimeGrid,
    pub space: SpaceGrid,
}

/// Largest admissible `σ̄² Δt / Δx²` for the explicit scheme.
pub const CFL_LIMIT: f64 = 0.5;

/// Default half-width of the space domain in units of `σ̄ √T`.
pub const DEFAULT_WIDTH_MULT: f64 = 6.0;

impl Grids {
    /// Builds grids, rejecting a time step that breaks the monotonicity bound.
    pub fn new(time: TimeGrid, space: SpaceGrid, band: &VolatilityBand) -> Result<Self> {
        let grids = Self { time, space };
        let ratio = grids.cfl_ratio(band);
        if ratio > CFL_LIMIT {
            return Err(Error::Cfl { ratio });
        }
        Ok(grids)
    }

    /// Symmetric domain `[−m σ̄ √T, m σ̄ √T]`; `steps = None` picks the
    /// smallest step count meeting the CFL bound.
    pub fn for_band(
        band: &VolatilityBand,
        horizon: f64,
        nodes: usize,
        width_mult: f64,
        steps: Option<usize>,
    ) -> Result<Self> {
        if !(width_mult.is_finite() && width_mult > 0.0) {
            return Err(Error::Domain(format!("width multiplier must be positive, got {width_mult}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        let half = width_mult * band.sigma_hi() * horizon.sqrt();
        let space = SpaceGrid::new(-half, half, nodes)?;
        let steps = match steps {
            Some(n) => n,
            None => min_cfl_steps(band, horizon, space.dx()),
        };
        Self::new(TimeGrid::new(horizon, steps)?, space, band)
    }

    pub fn cfl_ratio(&self, band: &VolatilityBand) -> f64 {
        let dx = self.space.dx();
        band.var_hi() * self.time.dt() / (dx * dx)
    }

    /// Smallest step count `≥ nt` placing every time in `times` on a node.
    pub fn aligned_to(&self, times: &[f64]) -> Result<Self> {
        let base = self.time.steps;
        for steps in base..=base.saturating_mul(64).max(base + 4096) {
            let time = TimeGrid { horizon: self.time.horizon, steps };
            if times.iter().all(|&t| time.node_of(t).is_some()) {
                return Ok(Self { time, space: self.space });
            }
        }
        Err(Error::GridMismatch(format!("no step count near {base} puts {times:?} on the time grid")))
    }

    /// `level` uniform refinements: space intervals doubled, time steps quadrupled.
    pub fn refined(&self, level: u32) -> Self {
        let f = 1usize << level;
        Self {
            time: TimeGrid { horizon: self.time.horizon, steps: self.time.steps * f * f },
            space: SpaceGrid { lo: self.space.lo, hi: self.space.hi, nodes: (self.space.nodes - 1) * f + 1 },
        }
    }

    pub fn nx(&self) -> usize {
        self.space.nodes
    }

    pub fn nt(&self) -> usize {
        self.time.steps
    }
}

/// Smallest step count with `σ̄² Δt / Δx² ≤ ½`.
pub fn min_cfl_steps(band: &VolatilityBand, horizon: f64, dx: f64) -> usize {
    let mut n = ((band.var_hi() * horizon / (CFL_LIMIT * dx * dx)).ceil() as usize).max(1);
    while band.var_hi() * (horizon / n as f64) / (dx * dx) > CFL_LIMIT {
        n += 1;
    }
    n
}

pub type PayoffFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type GeneratorFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Shape of a terminal payoff `φ`.
#[derive(Clone)]
pub enum PayoffKind {
    Linear { slope: f64, intercept: f64 },
    Square { scale: f64 },
    Call { strike: f64 },
    Put { strike: f64 },
    /// `(x − c + w)⁺ − 2(x − c)⁺ + (x − c − w)⁺`, a tent of height `w` centred at `c`.
    Butterfly { center: f64, half_width: f64 },
    /// Piecewise linear through the points, flat outside.
    Tabulated { xs: Vec<f64>, ys: Vec<f64> },
    Expression { source: String, func: PayoffFn },
}

impl fmt::Debug for PayoffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { slope, intercept } => write!(f, "Linear({slope}·x + {intercept})"),
            Self::Square { scale } => write!(f, "Square({scale}·x²)"),
            Self::Call { strike } => write!(f, "Call({strike})"),
            Self::Put { strike } => write!(f, "Put({strike})"),
            Self::Butterfly { center, half_width } => write!(f, "Butterfly({center}, {half_width})"),
            Self::Tabulated { xs, .. } => write!(f, "Tabulated({} points)", xs.len()),
            Self::Expression { source, .. } => write!(f, "Expression({source:?})"),
        }
    }
}

/// Terminal payoff with its Lipschitz constant and (optional) sup bound.
#[derive(Clone, Debug)]
pub struct Payoff {
    kind: PayoffKind,
    lipschitz: f64,
    bound: Option<f64>,
}

impl Payoff {
    pub fn linear(slope: f64, intercept: f64) -> Self {
        let bound = (slope == 0.0).then_some(intercept.abs());
        Self { kind: PayoffKind::Linear { slope, intercept }, lipschitz: slope.abs(), bound }
    }

    pub fn constant(c: f64) -> Self {
        Self::linear(0.0, c)
    }

    /// `s·x²`; Lipschitz only on bounded sets, see [`Payoff::lipschitz_on`].
    pub fn square(scale: f64) -> Self {
        let lipschitz = if scale == 0.0 { 0.0 } else { f64::INFINITY };
        Self { kind: PayoffKind::Square { scale }, lipschitz, bound: None }
    }

    pub fn call(strike: f64) -> Self {
        Self { kind: PayoffKind::Call { strike }, lipschitz: 1.0, bound: None }
    }

    pub fn put(strike: f64) -> Self {
        Self { kind: PayoffKind::Put { strike }, lipschitz: 1.0, bound: None }
    }

    pub fn butterfly(center: f64, half_width: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::Domain(format!("butterfly half-width must be positive, got {half_width}")));
        }
        Ok(Self { kind: PayoffKind::Butterfly { center, half_width }, lipschitz: 1.0, bound: Some(half_width) })
    }

    pub fn tabulated(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Domain("tabulated payoff needs equally many (non-zero) x and y values".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("tabulated payoff abscissae must be strictly increasing".into()));
        }
        if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::Domain("tabulated payoff values must be finite".into()));
        }
        let lipschitz = xs
            .windows(2)
            .zip(ys.windows(2))
            .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
            .fold(0.0, f64::max);
        let bound = ys.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        Ok(Self { kind: PayoffKind::Tabulated { xs, ys }, lipschitz, bound: Some(bound) })
    }

    /// A user-defined payoff; the Lipschitz constant is taken on trust.
    pub fn expression(source: impl Into<String>, func: PayoffFn, lipschitz: f64, bound: Option<f64>) -> Self {
        Self { kind: PayoffKind::Expression { source: source.into(), func }, lipschitz, bound }
    }

    pub fn kind(&self) -> &PayoffKind {
        &self.kind
    }

    /// Global Lipschitz constant (infinite for unbounded-slope kinds).
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    /// Lipschitz constant of the restriction to `[lo, hi]`.
    pub fn lipschitz_on(&self, lo: f64, hi: f64) -> f64 {
        match self.kind {
            PayoffKind::Square { scale } => 2.0 * scale.abs() * lo.abs().max(hi.abs()),
            _ => self.lipschitz,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match &self.kind {
            PayoffKind::Linear { slope, intercept } => slope * x + intercept,
            PayoffKind::Square { scale } => scale * x * x,
            PayoffKind::Call { strike } => (x - strike).max(0.0),
            PayoffKind::Put { strike } => (strike - x).max(0.0),
            PayoffKind::Butterfly { center, half_width } => {
                let d = x - center;
                (d + half_width).max(0.0) - 2.0 * d.max(0.0) + (d - half_width).max(0.0)
            }
            PayoffKind::Tabulated { xs, ys } => {
                if x <= xs[0] {
                    return ys[0];
                }
                let n = xs.len();
                if x >= xs[n - 1] {
                    return ys[n - 1];
                }
                let i = xs.partition_point(|&v| v <= x) - 1;
                let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
                (1.0 - w) * ys[i] + w * ys[i + 1]
            }
            PayoffKind::Expression { func, .. } => func(x),
        }
    }

    /// Whether the payoff is convex (known for the built-in kinds only).
    pub fn is_convex(&self) -> Option<bool> {
        match &self.kind {
            PayoffKind::Linear { .. } | PayoffKind::Call { .. } | PayoffKind::Put { .. } => Some(true),
            PayoffKind::Square { scale } => Some(*scale >= 0.0),
            PayoffKind::Butterfly { .. } => Some(false),
            PayoffKind::Tabulated { xs, ys } => Some(
                xs.windows(3).zip(ys.windows(3)).all(|(x, y)| {
                    (y[2] - y[1]) / (x[2] - x[1]) >= (y[1] - y[0]) / (x[1] - x[0]) - 1e-12
                }),
            ),
            PayoffKind::Expression { .. } => None,
        }
    }

    /// Largest difference quotient over adjacent nodes and a stride of wider
    /// pairs; returns it when it exceeds the declared constant.
    pub fn spot_check_lipschitz(&self, space: &SpaceGrid) -> Option<f64> {
        let claimed = self.lipschitz_on(space.lo, space.hi);
        let vals: Vec<f64> = space.xs().iter().map(|&x| self.eval(x)).collect();
        let mut worst = 0.0f64;
        for lag in [1usize, 2, 7, 31] {
            for j in 0..space.nodes.saturating_sub(lag) {
                let q = (vals[j + lag] - vals[j]).abs() / (space.x(j + lag) - space.x(j));
                worst = worst.max(q);
            }
        }
        (worst > claimed * (1.0 + 1e-9) + 1e-12).then_some(worst)
    }
}

/// Driver of the backward equation: `f(t, y, z)` multiplies `dt` and the
/// optional `g(t, y, z)` multiplies `d⟨B⟩`.
#[derive(Clone)]
pub struct Generator {
    f: Option<GeneratorFn>,
    g: Option<GeneratorFn>,
    lipschitz: f64,
    f0_bound: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    label: String,
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("label", &self.label)
            .field("has_f", &self.f.is_some())
            .field("has_g", &self.g.is_some())
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl Default for Generator {
    fn default() -> Self {
        Self::zero()
    }
}

impl Generator {
    pub fn zero() -> Self {
        Self { f: None, g: None, lipschitz: 0.0, f0_bound: None, label: "0".into() }
    }

    pub fn constant(c: f64) -> Self {
        let mut gen = Self::new(Arc::new(move |_, _, _| c), 0.0);
        gen.label = format!("{c}");
        gen
    }

    /// `f` with joint Lipschitz constant `lipschitz` in `(y, z)`.
    pub fn new(f: GeneratorFn, lipschitz: f64) -> Self {
        Self { f: Some(f), g: None, lipschitz, f0_bound: None, label: "f".into() }
    }

    pub fn with_g(mut self, g: GeneratorFn) -> Self {
        self.g = Some(g);
        self
    }

    pub fn with_f0_bound(mut self, bound: Arc<dyn Fn(f64) -> f64 + Send + Sync>) -> Self {
        self.f0_bound = Some(bound);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn has_f(&self) -> bool {
        self.f.is_some()
    }

    pub fn has_g(&self) -> bool {
        self.g.is_some()
    }

    #[inline]
    pub fn f(&self, t: f64, y: f64, z: f64) -> f64 {
        self.f.as_ref().map_or(0.0, |f| f(t, y, z))
    }

    #[inline]
    pub fn g(&self, t: f64, y: f64, z: f64) -> f64 {
        self.g.as_ref().map_or(0.0, |g| g(t, y, z))
    }

    /// `|f(t, 0, 0)|` unless an explicit bound was supplied.
    pub fn f0(&self, t: f64) -> f64 {
        match &self.f0_bound {
            Some(b) => b(t),
            None => self.f(t, 0.0, 0.0).abs(),
        }
    }

    /// Largest observed `|Δf| / (|Δy| + |Δz|)` (and likewise for `g`) over a
    /// deterministic lattice of sample pairs.
    pub fn observed_lipschitz(&self, horizon: f64, radius: f64) -> f64 {
        let pts: Vec<f64> = (0..9).map(|i| -radius + 2.0 * radius * i as f64 / 8.0).collect();
        let ts = [0.0, 0.5 * horizon, horizon];
        let mut worst = 0.0f64;
        for &t in &ts {
            for &y in &pts {
                for &z in &pts {
                    for (dy, dz) in [(1e-3, 0.0), (0.0, 1e-3), (0.37, -0.21), (-1.3, 0.8)] {
                        let den = f64::abs(dy) + f64::abs(dz);
                        let df = (self.f(t, y + dy, z + dz) - self.f(t, y, z)).abs();
                        let dg = (self.g(t, y + dy, z + dz) - self.g(t, y, z)).abs();
                        worst = worst.max(df / den).max(dg / den);
                    }
                }
            }
        }
        worst
    }
}

const SERIES_TERMS: usize = 1_000_000;

/// Evaluates `γ/(γ−1)·(1 + 14 Σ_{i≥1} i^{−β/γ})`, summing the first 10⁶
/// terms and bounding the rest by `∫_N^∞ x^{−p} dx`.
fn moment_objective(log_table: &[f64], beta: f64, gamma: f64) -> f64 {
    let p = beta / gamma;
    // smallest terms first
    let head: f64 = log_table.iter().rev().map(|&l| (-p * l).exp()).sum();
    let n = log_table.len() as f64;
    let tail = n.powf(1.0 - p) / (p - 1.0);
    gamma / (gamma - 1.0) * (1.0 + 14.0 * (head + tail))
}

/// The constant `C₁ = 2 inf_γ γ/(γ−1)(1 + 14 Σ i^{−β/γ})` over
/// `1 < γ < β = (α+δ)/α`, `γ ≤ 2`, bounding the G-evaluation norm by
/// G-moments of order `α + δ`.
///
/// The infimum is located by a coarse scan followed by golden-section
/// refinement; every evaluated series is an upper bound of the true sum.
pub fn moment_constant(alpha: f64, delta: f64) -> Result<f64> {
    if !(alpha >= 1.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!("alpha must be >= 1, got {alpha}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Domain(format!("delta must be > 0, got {delta}")));
    }
    let beta = (alpha + delta) / alpha;
    let log_table: Vec<f64> = (1..=SERIES_TERMS).map(|i| (i as f64).ln()).collect();
    let objective = |g: f64| moment_objective(&log_table, beta, g);

    let lo = 1.0;
    let (hi, hi_closed) = if beta > 2.0 { (2.0, true) } else { (beta, false) };
    let span = hi - lo;
    let scan = 48usize;
    let point = |i: usize| {
        if hi_closed && i == scan {
            hi
        } else {
            lo + span * i as f64 / scan as f64
        }
    };
    let last = if hi_closed { scan } else { scan - 1 };
    let mut best = (f64::INFINITY, 1usize);
    for i in 1..=last {
        let v = objective(point(i));
        if v < best.0 {
            best = (v, i);
        }
    }
    let a = point(best.1 - 1).max(lo + 1e-9 * span);
    let b = if best.1 == last { point(last) } else { point(best.1 + 1) };
    let b = if hi_closed { b } else { b.min(hi - 1e-9 * span) };

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (a, b);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    let mut min_val = best.0.min(fc).min(fd);
    for _ in 0..40 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
            min_val = min_val.min(fc);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
            min_val = min_val.min(fd);
        }
        if (b - a) < 1e-7 {
            break;
        }
    }
    Ok(2.0 * min_val)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band() -> VolatilityBand {
        VolatilityBand::new(0.5, 1.0).unwrap()
    }

    #[test]
    fn g_function_values() {
        let b = band();
        assert_eq!(g_function(0.0, &b), 0.0);
        assert_eq!(g_function(2.0, &b), 1.0);
        assert_eq!(g_function(-2.0, &b), -0.25);
    }

    #[test]
    fn gamma_argmax_values() {
        let b = band();
        assert_eq!(gamma_argmax(3.0, &b), 1.0);
        assert_eq!(gamma_argmax(-3.0, &b), 0.25);
        assert_eq!(gamma_argmax(0.0, &b), 1.0);
    }

    #[test]
    fn gamma_argmax_is_brute_force_maximizer() {
        let b = band();
        for &a in &[-3.0, -0.1, 0.2, 5.0] {
            let grid: Vec<f64> = (0..=1000).map(|i| b.var_lo() + (b.var_hi() - b.var_lo()) * i as f64 / 1000.0).collect();
            let best = grid.iter().copied().fold(f64::NEG_INFINITY, |m, g| m.max(0.5 * g * a));
            assert!((best - g_function(a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn band_rejects_degenerate_input() {
        assert!(VolatilityBand::new(0.0, 1.0).is_err());
        assert!(VolatilityBand::new(1.0, 0.5).is_err());
        assert!(VolatilityBand::new(0.3, 0.3).is_ok());
    }

    #[test]
    fn reference_grid_meets_cfl_and_centres_zero() {
        let g = Grids::for_band(&band(), 1.0, 401, DEFAULT_WIDTH_MULT, None).unwrap();
        assert!(g.cfl_ratio(&band()) <= CFL_LIMIT);
        let fewer = Grids::for_band(&band(), 1.0, 401, DEFAULT_WIDTH_MULT, Some(g.nt() - 1));
        assert!(matches!(fewer, Err(Error::Cfl { .. })));
        assert_eq!(g.space.x(200), 0.0);
        assert_eq!(g.space.x(0), -6.0);
        assert_eq!(g.space.x(400), 6.0);
        assert_eq!(g.time.t(g.nt()), 1.0);
    }

    #[test]
    fn refinement_keeps_cfl_and_nests_nodes() {
        let g = Grids::for_band(&band(), 1.0, 41, 6.0, None).unwrap();
        let r = g.refined(1);
        assert_eq!(r.nx(), 81);
        assert_eq!(r.nt(), 4 * g.nt());
        assert!((r.cfl_ratio(&band()) - g.cfl_ratio(&band())).abs() < 1e-12);
        assert!((r.space.x(2 * 7) - g.space.x(7)).abs() < 1e-12);
    }

    #[test]
    fn locate_and_interpolate() {
        let s = SpaceGrid::new(-1.0, 1.0, 5).unwrap();
        let v: Vec<f64> = s.xs().iter().map(|x| 3.0 * x + 1.0).collect();
        assert!((s.interpolate(&v, 0.3) - 1.9).abs() < 1e-12);
        assert_eq!(s.interpolate(&v, 5.0), 4.0);
        assert_eq!(s.interpolate(&v, -5.0), -2.0);
        assert_eq!(s.nearest(0.24), 2);
        assert_eq!(s.nearest(0.25), 3);
    }

    #[test]
    fn payoff_shapes() {
        let b = Payoff::butterfly(0.0, 1.0).unwrap();
        assert_eq!(b.eval(0.0), 1.0);
        assert_eq!(b.eval(0.5), 0.5);
        assert_eq!(b.eval(-2.0), 0.0);
        assert_eq!(b.eval(3.0), 0.0);
        let t = Payoff::tabulated(vec![-1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(t.eval(-0.5), 0.5);
        assert_eq!(t.eval(1.0), 0.5);
        assert_eq!(t.eval(9.0), 0.0);
        assert_eq!(t.lipschitz(), 1.0);
        assert_eq!(Payoff::square(1.0).lipschitz_on(-6.0, 6.0), 12.0);
        assert_eq!(Payoff::call(0.5).eval(1.0), 0.5);
        assert_eq!(Payoff::put(0.5).eval(0.0), 0.5);
    }

    #[test]
    fn lipschitz_spot_check_flags_understated_constant() {
        let s = SpaceGrid::new(-3.0, 3.0, 61).unwrap();
        assert!(Payoff::call(0.0).spot_check_lipschitz(&s).is_none());
        let wrong = Payoff::expression("2*x", Arc::new(|x| 2.0 * x), 1.0, None);
        assert!(wrong.spot_check_lipschitz(&s).is_some());
    }

    #[test]
    fn generator_lipschitz_probe() {
        let gen = Generator::new(Arc::new(|_, y: f64, z: f64| 0.2 * y.tanh() + 0.1 * z.tanh()), 0.2);
        assert!(gen.observed_lipschitz(1.0, 3.0) <= 0.2 + 1e-9);
        assert_eq!(gen.f0(0.3), 0.0);
        assert_eq!(Generator::constant(-2.0).f0(0.0), 2.0);
    }

    /// Direct brute-force oracle: powf summation, no log table, on the
    /// γ-grid 1.01, 1.02, ….
    fn moment_oracle(beta: f64) -> f64 {
        let n = SERIES_TERMS;
        let mut best = f64::INFINITY;
        for k in 1..=100 {
            let g = 1.0 + 0.01 * k as f64;
            if g >= beta || g > 2.0 + 1e-12 {
                continue;
            }
            let p = beta / g;
            let mut s = 0.0;
            for i in (1..=n).rev() {
                s += (i as f64).powf(-p);
            }
            s += (n as f64).powf(1.0 - p) / (p - 1.0);
            best = best.min(g / (g - 1.0) * (1.0 + 14.0 * s));
        }
        2.0 * best
    }

    #[test]
    fn moment_constant_matches_grid_oracle() {
        for (alpha, delta) in [(1.0, 1.0), (1.0, 3.0)] {
            let beta = (alpha + delta) / alpha;
            let oracle = moment_oracle(beta);
            let c = moment_constant(alpha, delta).unwrap();
            assert!(c <= oracle * (1.0 + 1e-12), "{c} vs {oracle}");
            assert!((c - oracle).abs() <= 0.01 * oracle, "{c} vs {oracle}");
            assert!(c > 2.0);
        }
    }

    #[test]
    fn moment_constant_domain() {
        assert!(moment_constant(0.5, 1.0).is_err());
        assert!(moment_constant(1.0, 0.0).is_err());
        assert!(moment_constant(2.0, 0.5).unwrap().is_finite());
    }
}
