//! TOML run configuration. Unknown keys are rejected, and every problem
//! object is built (and so validated) at load time.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::expr::{parse_expression, Env, EvalError, Expression, Var};
use crate::bsde::TwoEpochProblem;
use crate::expectation::{IncrementPayoff, VolControl};
use crate::model::{Generator, Grids, Payoff, VolatilityBand, DEFAULT_WIDTH_MULT};
use crate::verify::{SuiteProblem, VerifyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "defaults::horizon")]
    pub horizon: f64,
    pub band: BandSection,
    #[serde(default)]
    pub grid: GridSection,
    pub payoff: PayoffSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_epoch: Option<TwoEpochSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<ExpectSpec>,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

mod defaults {
    pub fn horizon() -> f64 {
        1.0
    }
    pub fn nx() -> usize {
        401
    }
    pub fn width_mult() -> f64 {
        super::DEFAULT_WIDTH_MULT
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn n_paths() -> usize {
        1000
    }
    pub fn control() -> String {
        "upper".into()
    }
    pub fn segments() -> usize {
        8
    }
    pub fn candidates() -> usize {
        32
    }
    pub fn export_paths() -> usize {
        16
    }
    pub fn residual_paths() -> usize {
        32
    }
    pub fn checks() -> Vec<String> {
        vec!["all".into()]
    }
    pub fn alpha() -> f64 {
        1.5
    }
    pub fn kappa_steps() -> usize {
        4
    }
    pub fn controls() -> usize {
        8
    }
    pub fn grid_tol() -> f64 {
        5e-3
    }
    pub fn lipschitz_tol() -> f64 {
        0.05
    }
    pub fn perturbations() -> Vec<f64> {
        vec![0.1, 0.05, 0.025]
    }
    pub fn dir() -> std::path::PathBuf {
        "out".into()
    }
    pub fn formats() -> Vec<String> {
        vec!["csv".into(), "jsonl".into()]
    }
    pub fn max_rows() -> usize {
        201
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSection {
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "defaults::nx")]
    pub nx: usize,
    /// Time steps; the smallest CFL-admissible count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nt: Option<usize>,
    #[serde(default = "defaults::width_mult")]
    pub width_mult: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { nx: defaults::nx(), nt: None, width_mult: defaults::width_mult() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PayoffSpec {
    Linear {
        #[serde(default = "defaults::one")]
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    Constant {
        value: f64,
    },
    Square {
        #[serde(default = "defaults::one")]
        scale: f64,
    },
    Call {
        #[serde(default)]
        strike: f64,
    },
    Put {
        #[serde(default)]
        strike: f64,
    },
    Butterfly {
        #[serde(default)]
        center: f64,
        #[serde(default = "defaults::one")]
        half_width: f64,
    },
    Tabulated {
        xs: Vec<f64>,
        ys: Vec<f64>,
    },
    Expression {
        expr: String,
        lipschitz: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bound: Option<f64>,
    },
}

/// `f` and `g` as expressions in `t, y, z`, or the catalog name `"zero"`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<String>,
    /// Joint Lipschitz constant in `(y, z)`; required when `f` or `g`
    /// depends on `y` or `z`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoEpochSpec {
    pub t1: f64,
    /// `ψ(x, y)` with `x = B_{t₁}` and `y = B_T − B_{t₁}`.
    pub psi: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectSpec {
    /// `t₁ < … < t_m = T`, at most three.
    pub times: Vec<f64>,
    /// `φ` of the increments, named `x`, `y`, `z` in order.
    pub phi: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "defaults::n_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// `upper`, `lower`, `constant`, `random` or `bang-bang`.
    #[serde(default = "defaults::control")]
    pub control: String,
    /// Volatility of the `constant` control.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default = "defaults::segments")]
    pub segments: usize,
    /// Stream index of the `random` control.
    #[serde(default)]
    pub random_index: u64,
    /// Random controls tried by `expect`'s dual bound.
    #[serde(default = "defaults::candidates")]
    pub candidates: usize,
    /// Paths written to `paths.csv` and `triple.csv`.
    #[serde(default = "defaults::export_paths")]
    pub export_paths: usize,
    /// Paths used for residuals in the convergence table.
    #[serde(default = "defaults::residual_paths")]
    pub residual_paths: usize,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            n_paths: defaults::n_paths(),
            seed: 0,
            control: defaults::control(),
            sigma: None,
            segments: defaults::segments(),
            random_index: 0,
            candidates: defaults::candidates(),
            export_paths: defaults::export_paths(),
            residual_paths: defaults::residual_paths(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "defaults::checks")]
    pub checks: Vec<String>,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lw: Option<f64>,
    #[serde(default = "defaults::kappa_steps")]
    pub kappa_steps: usize,
    #[serde(default = "defaults::n_paths")]
    pub n_paths: usize,
    /// Defaults to `mc.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "defaults::controls")]
    pub controls: usize,
    #[serde(default = "defaults::segments")]
    pub segments: usize,
    #[serde(default = "defaults::grid_tol")]
    pub grid_tol: f64,
    #[serde(default = "defaults::lipschitz_tol")]
    pub lipschitz_tol: f64,
    #[serde(default = "defaults::perturbations")]
    pub perturbations: Vec<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            checks: defaults::checks(),
            alpha: defaults::alpha(),
            eps: 0.0,
            lw: None,
            kappa_steps: defaults::kappa_steps(),
            n_paths: defaults::n_paths(),
            seed: None,
            controls: defaults::controls(),
            segments: defaults::segments(),
            grid_tol: defaults::grid_tol(),
            lipschitz_tol: defaults::lipschitz_tol(),
            perturbations: defaults::perturbations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "defaults::dir")]
    pub dir: PathBuf,
    /// Any of `csv`, `jsonl`.
    #[serde(default = "defaults::formats")]
    pub formats: Vec<String>,
    /// Largest number of time rows written per surface; rows are subsampled
    /// with a uniform stride that always keeps `t = 0` and `t = T`.
    #[serde(default = "defaults::max_rows")]
    pub max_rows: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: defaults::dir(), formats: defaults::formats(), max_rows: defaults::max_rows() }
    }
}

impl OutputSection {
    pub fn csv(&self) -> bool {
        self.formats.iter().any(|f| f == "csv")
    }

    pub fn jsonl(&self) -> bool {
        self.formats.iter().any(|f| f == "jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Records the first evaluation failure of a compiled expression, which then
/// yields NaN; the solver stops on the non-finite value and the caller reports
/// the recorded error.
#[derive(Debug, Clone, Default)]
pub struct EvalTrap(Arc<OnceLock<(String, EvalError)>>);

impl EvalTrap {
    pub fn take(&self) -> Option<(String, EvalError)> {
        self.0.get().cloned()
    }

    fn eval(&self, label: &str, e: &Expression, env: &Env) -> f64 {
        e.eval(env).unwrap_or_else(|err| {
            let _ = self.0.set((label.to_string(), err));
            f64::NAN
        })
    }
}

fn parse_in(label: &str, src: &str, allowed: &[Var]) -> Result<Expression, ConfigError> {
    let e = parse_expression(src).map_err(|err| invalid(format!("{label}: {err}")))?;
    if let Some(v) = e.variables().into_iter().find(|v| !allowed.contains(v)) {
        let names: Vec<&str> = allowed.iter().map(|v| v.name()).collect();
        return Err(invalid(format!("{label}: variable `{}` is not available here (allowed: {})", v.name(), names.join(", "))));
    }
    Ok(e)
}

fn positive(label: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(format!("{label} must be positive and finite, got {v}")))
    }
}

/// Everything built from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub band: VolatilityBand,
    /// Grids with any observation times (`t₁`, increment times) on nodes.
    pub grids: Grids,
    pub payoff: Payoff,
    pub generator: Generator,
    pub two_epoch: Option<TwoEpochProblem>,
    pub expect: Option<IncrementPayoff>,
    pub trap: EvalTrap,
    /// Lipschitz spot-check findings; reported, never fatal.
    pub warnings: Vec<String>,
}

impl RunConfig {
    pub fn from_toml_str(src: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| invalid(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&src)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn verify_params(&self) -> VerifyParams {
        let v = &self.verify;
        VerifyParams {
            alpha: v.alpha,
            eps: v.eps,
            lw: v.lw,
            kappa_steps: v.kappa_steps,
            n_paths: v.n_paths,
            seed: v.seed.unwrap_or(self.mc.seed),
            controls: v.controls,
            segments: v.segments,
            grid_tol: v.grid_tol,
            lipschitz_tol: v.lipschitz_tol,
            perturbations: v.perturbations.clone(),
            ..VerifyParams::default()
        }
    }

    /// The control named by `[mc]`, or `None` for the bang-bang feedback.
    pub fn open_control(&self, band: &VolatilityBand, steps: usize) -> Result<Option<VolControl>, ConfigError> {
        let mc = &self.mc;
        Ok(Some(match mc.control.as_str() {
            "upper" => VolControl::upper(steps, band),
            "lower" => VolControl::lower(steps, band),
            "constant" => {
                let s = mc.sigma.ok_or_else(|| invalid("mc.control = \"constant\" needs mc.sigma"))?;
                VolControl::constant(s, steps, band).map_err(|e| invalid(format!("mc.sigma: {e}")))?
            }
            "random" => {
                if mc.segments == 0 {
                    return Err(invalid("mc.segments must be at least 1"));
                }
                VolControl::random(band, steps, mc.segments, mc.seed, mc.random_index)
            }
            "bang-bang" => return Ok(None),
            other => {
                return Err(invalid(format!(
                    "unknown mc.control `{other}` (expected upper, lower, constant, random or bang-bang)"
                )))
            }
        }))
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let horizon = positive("horizon", self.horizon)?;
        let band = VolatilityBand::new(self.band.sigma_lo, self.band.sigma_hi).map_err(|e| invalid(format!("band: {e}")))?;
        if self.grid.nx < 3 {
            return Err(invalid(format!("grid.nx must be at least 3, got {}", self.grid.nx)));
        }
        if self.grid.nt == Some(0) {
            return Err(invalid("grid.nt must be at least 1"));
        }
        let mut grids = Grids::for_band(&band, horizon, self.grid.nx, self.grid.width_mult, self.grid.nt)
            .map_err(|e| invalid(format!("grid: {e}")))?;
        let trap = EvalTrap::default();
        let mut warnings = Vec::new();

        let payoff = self.build_payoff(&trap)?;
        if let Some(seen) = payoff.spot_check_lipschitz(&grids.space) {
            warnings.push(format!(
                "payoff: observed slope {seen} exceeds the declared Lipschitz constant {}",
                payoff.lipschitz()
            ));
        }
        let generator = self.build_generator(&trap)?;
        let declared = generator.lipschitz();
        let seen = generator.observed_lipschitz(horizon, grids.space.hi);
        if seen > declared * (1.0 + 1e-9) + 1e-12 {
            warnings.push(format!("generator: observed Lipschitz ratio {seen} exceeds the declared constant {declared}"));
        }

        let mut times = Vec::new();
        if let Some(te) = &self.two_epoch {
            if !(te.t1 > 0.0 && te.t1 < horizon) {
                return Err(invalid(format!("two_epoch.t1 = {} must lie in (0, {horizon})", te.t1)));
            }
            times.push(te.t1);
        }
        if let Some(ex) = &self.expect {
            if ex.times.is_empty() || ex.times.len() > crate::expectation::MAX_INCREMENTS {
                return Err(invalid("expect.times must list between 1 and 3 times"));
            }
            if (ex.times[ex.times.len() - 1] - horizon).abs() > 1e-12 * horizon {
                return Err(invalid(format!("the last of expect.times must equal the horizon {horizon}")));
            }
            times.extend(&ex.times);
        }
        if !times.is_empty() {
            grids = grids.aligned_to(&times).map_err(|e| invalid(format!("grid: {e}")))?;
        }

        let two_epoch = match &self.two_epoch {
            Some(te) => {
                let e = parse_in("two_epoch.psi", &te.psi, &[Var::X, Var::Y])?;
                let trap = trap.clone();
                Some(TwoEpochProblem {
                    t1: te.t1,
                    psi: Arc::new(move |x, y| trap.eval("two_epoch.psi", &e, &Env { x, y, ..Env::default() })),
                    generator: generator.clone(),
                    band,
                    grids,
                })
            }
            None => None,
        };
        let expect = match &self.expect {
            Some(ex) => {
                let vars = [Var::X, Var::Y, Var::Z];
                let e = parse_in("expect.phi", &ex.phi, &vars[..ex.times.len()])?;
                let trap = trap.clone();
                let phi = Arc::new(move |d: &[f64]| {
                    let at = |i: usize| d.get(i).copied().unwrap_or(0.0);
                    trap.eval("expect.phi", &e, &Env { x: at(0), y: at(1), z: at(2), t: 0.0 })
                });
                Some(IncrementPayoff::new(ex.times.clone(), phi).map_err(|e| invalid(format!("expect.times: {e}")))?)
            }
            None => None,
        };

        self.open_control(&band, grids.nt())?;
        if self.mc.n_paths == 0 {
            return Err(invalid("mc.n_paths must be at least 1"));
        }
        if self.verify.n_paths == 0 {
            return Err(invalid("verify.n_paths must be at least 1"));
        }
        if self.verify.alpha.is_nan() || self.verify.alpha <= 1.0 {
            return Err(invalid(format!("verify.alpha must be > 1, got {}", self.verify.alpha)));
        }
        for name in &self.verify.checks {
            if !name.trim().eq_ignore_ascii_case("all") && crate::verify::resolve_check(name).is_none() {
                return Err(invalid(format!("unknown check `{name}`")));
            }
        }
        if let Some(f) = self.output.formats.iter().find(|f| !matches!(f.as_str(), "csv" | "jsonl")) {
            return Err(invalid(format!("unknown output format `{f}` (expected csv or jsonl)")));
        }
        if self.output.max_rows < 2 {
            return Err(invalid("output.max_rows must be at least 2"));
        }

        Ok(Resolved { band, grids, payoff, generator, two_epoch, expect, trap, warnings })
    }

    fn build_payoff(&self, trap: &EvalTrap) -> Result<Payoff, ConfigError> {
        Ok(match &self.payoff {
            PayoffSpec::Linear { slope, intercept } => Payoff::linear(*slope, *intercept),
            PayoffSpec::Constant { value } => Payoff::constant(*value),
            PayoffSpec::Square { scale } => Payoff::square(*scale),
            PayoffSpec::Call { strike } => Payoff::call(*strike),
            PayoffSpec::Put { strike } => Payoff::put(*strike),
            PayoffSpec::Butterfly { center, half_width } => {
                Payoff::butterfly(*center, *half_width).map_err(|e| invalid(format!("payoff: {e}")))?
            }
            PayoffSpec::Tabulated { xs, ys } => {
                Payoff::tabulated(xs.clone(), ys.clone()).map_err(|e| invalid(format!("payoff: {e}")))?
            }
            PayoffSpec::Expression { expr, lipschitz, bound } => {
                if !(lipschitz.is_finite() && *lipschitz >= 0.0) {
                    return Err(invalid(format!("payoff.lipschitz must be finite and >= 0, got {lipschitz}")));
                }
                let e = parse_in("payoff.expr", expr, &[Var::X])?;
                let trap = trap.clone();
                let func = Arc::new(move |x| trap.eval("payoff.expr", &e, &Env { x, ..Env::default() }));
                Payoff::expression(expr.clone(), func, *lipschitz, *bound)
            }
        })
    }

    fn build_generator(&self, trap: &EvalTrap) -> Result<Generator, ConfigError> {
        let spec = &self.generator;
        let vars = [Var::T, Var::Y, Var::Z];
        let parse = |label: &str, src: &Option<String>| -> Result<Option<Expression>, ConfigError> {
            match src.as_deref().map(str::trim) {
                None | Some("zero") | Some("0") => Ok(None),
                Some(s) => parse_in(label, s, &vars).map(Some),
            }
        };
        let f = parse("generator.f", &spec.f)?;
        let g = parse("generator.g", &spec.g)?;
        let state_dependent = [&f, &g]
            .iter()
            .filter_map(|e| e.as_ref())
            .any(|e| e.variables().iter().any(|v| matches!(v, Var::Y | Var::Z)));
        let lipschitz = match spec.lipschitz {
            Some(l) if l.is_finite() && l >= 0.0 => l,
            Some(l) => return Err(invalid(format!("generator.lipschitz must be finite and >= 0, got {l}"))),
            None if state_dependent => {
                return Err(invalid("generator.lipschitz is required when f or g depends on y or z"))
            }
            None => 0.0,
        };
        let mut gen = match &f {
            Some(e) => {
                let (e, trap) = (e.clone(), trap.clone());
                Generator::new(Arc::new(move |t, y, z| trap.eval("generator.f", &e, &Env { t, y, z, x: 0.0 })), lipschitz)
            }
            None => {
                let mut z = Generator::zero();
                if g.is_some() {
                    z = Generator::new(Arc::new(|_, _, _| 0.0), lipschitz);
                }
                z
            }
        };
        if let Some(e) = g {
            let trap = trap.clone();
            gen = gen.with_g(Arc::new(move |t, y, z| trap.eval("generator.g", &e, &Env { t, y, z, x: 0.0 })));
        }
        let label = match (&spec.f, &spec.g) {
            (None, None) => "0".to_string(),
            (f, g) => format!("f = {}; g = {}", f.as_deref().unwrap_or("0"), g.as_deref().unwrap_or("0")),
        };
        Ok(gen.with_label(label))
    }
}

impl Resolved {
    pub fn suite_problem(&self) -> SuiteProblem {
        SuiteProblem { payoff: self.payoff.clone(), generator: self.generator.clone(), band: self.band, grids: self.grids }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
horizon = 1.0
[band]
sigma_lo = 0.5
sigma_hi = 1.0
[grid]
nx = 101
[payoff]
kind = "expression"
expr = "x^2"
lipschitz = 12.0
[generator]
f = "0.2*tanh(y) + 0.1*tanh(z)"
lipschitz = 0.2
"#;

    #[test]
    fn loads_and_resolves() {
        let c = RunConfig::from_toml_str(BASE).unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.grids.nx(), 101);
        assert_eq!(r.payoff.eval(3.0), 9.0);
        assert!((r.generator.f(0.0, 1.0, 0.0) - 0.2 * 1f64.tanh()).abs() < 1e-15);
        assert!(r.warnings.is_empty(), "{:?}", r.warnings);
        assert_eq!(c.mc.control, "upper");
        let again = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = BASE.replace("nx = 101", "nx = 101\nny = 3");
        let e = RunConfig::from_toml_str(&src).unwrap_err();
        assert!(e.0.contains("ny"), "{e}");
        let src = BASE.replace("lipschitz = 12.0", "lipschitz = 12.0\nstrike = 1");
        assert!(RunConfig::from_toml_str(&src).is_err());
        let src = format!("{BASE}\n[extra]\na = 1\n");
        assert!(RunConfig::from_toml_str(&src).is_err());
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let bad = |from: &str, to: &str| RunConfig::from_toml_str(&BASE.replace(from, to)).unwrap().resolve().unwrap_err();
        assert!(bad("sigma_lo = 0.5", "sigma_lo = 1.5").0.contains("band"));
        assert!(bad("nx = 101", "nx = 101\nnt = 3").0.contains("grid"));
        assert!(bad("expr = \"x^2\"", "expr = \"x^2 + y\"").0.contains("variable `y`"));
        assert!(bad("expr = \"x^2\"", "expr = \"x^^2\"").0.contains("column 3"));
        assert!(bad("lipschitz = 0.2", "").0.contains("lipschitz"));
    }

    #[test]
    fn observation_times_are_put_on_nodes() {
        let src = format!("{BASE}\n[two_epoch]\nt1 = 0.3\npsi = \"x^2 + y^2\"\n");
        let r = RunConfig::from_toml_str(&src).unwrap().resolve().unwrap();
        assert!(r.grids.time.node_of(0.3).is_some());
        assert!(r.two_epoch.is_some());
        let src = format!("{BASE}\n[expect]\ntimes = [0.5, 1.0]\nphi = \"x^2 + y^2\"\n");
        let r = RunConfig::from_toml_str(&src).unwrap().resolve().unwrap();
        assert_eq!(r.expect.unwrap().eval(&[1.0, 2.0]), 5.0);
        let src = format!("{BASE}\n[expect]\ntimes = [0.5, 0.9]\nphi = \"x\"\n");
        assert!(RunConfig::from_toml_str(&src).unwrap().resolve().is_err());
    }

    #[test]
    fn false_lipschitz_claims_warn() {
        let src = BASE.replace("lipschitz = 12.0", "lipschitz = 1.0");
        let r = RunConfig::from_toml_str(&src).unwrap().resolve().unwrap();
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn evaluation_errors_are_trapped() {
        let src = BASE.replace("expr = \"x^2\"", "expr = \"1/x\"");
        let r = RunConfig::from_toml_str(&src).unwrap().resolve().unwrap();
        assert!(r.payoff.eval(0.0).is_nan());
        let (label, err) = r.trap.take().unwrap();
        assert_eq!(label, "payoff.expr");
        assert_eq!(err.column, 2);
    }
}
