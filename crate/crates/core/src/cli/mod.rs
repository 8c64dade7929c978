//! Command line: `gbsde <command> --config run.toml [--out DIR] [--seed N]`.
//!
//! Exit codes: 0 success, 1 a requested check failed, 2 invalid usage or
//! configuration, 3 numerical failure (non-finite values, exceeded budgets,
//! expression evaluation errors).

pub mod config;
pub mod expr;
pub mod output;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::bsde::{extract_triple, max_residual, solve_markovian, solve_two_epoch, streamed_residuals, terminal_value, BangBang};
use crate::expectation::{
    g_expectation, simulate_paths, sup_over_controls, Candidates, IncrementPayoff, McEstimate, PathBundle, VolPolicy,
};
use crate::verify::{control_family, run_suite, GridMeta, VerifyReport};
use config::{ConfigError, EvalTrap, Resolved, RunConfig};
use output::{ConvergenceRow, OutputDir};

/// Cap on `Σ nx·nt` over the levels of a refinement study.
pub const CONVERGENCE_WORK_BUDGET: f64 = 2.0e10;

#[derive(Debug, Parser)]
#[command(name = "gbsde", version, about = "Solvers for backward SDEs driven by G-Brownian motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed, overriding `mc.seed` and `verify.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the Markovian problem; write surfaces, paths and the triple.
    Solve(Common),
    /// Solve a two-epoch problem `ξ = ψ(B_{t₁}, B_T − B_{t₁})`.
    TwoEpoch(Common),
    /// Lattice G-expectation with a Monte Carlo lower bound.
    Expect(Common),
    /// Simulate paths under the configured control.
    Simulate(Common),
    /// Run verification checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated check names, or `all`; overrides `verify.checks`.
        #[arg(long)]
        checks: Option<String>,
    },
    /// Refinement table for `Y₀` and the path residual.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        levels: u32,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::TwoEpoch(_) => "two-epoch",
            Command::Expect(_) => "expect",
            Command::Simulate(_) => "simulate",
            Command::Verify { .. } => "verify",
            Command::Convergence { .. } => "convergence",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Solve(c) | Command::TwoEpoch(c) | Command::Expect(c) | Command::Simulate(c) => c,
            Command::Verify { common, .. } | Command::Convergence { common, .. } => common,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(format!("writing output: {e}"))
    }
}

/// A library error, preferring a trapped expression error as its cause.
fn numerical(trap: &EvalTrap) -> impl Fn(crate::Error) -> Failure + '_ {
    move |e| match trap.take() {
        Some((label, err)) => Failure::Numerical(format!("{label}: {err} (while {e})")),
        None => Failure::Numerical(e.to_string()),
    }
}

struct Outcome {
    pass: bool,
    results: BTreeMap<&'static str, Value>,
}

impl Outcome {
    fn ok() -> Self {
        Self { pass: true, results: BTreeMap::new() }
    }

    fn set(&mut self, key: &'static str, v: impl Into<Value>) {
        self.results.insert(key, v.into());
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: invalid configuration: {m}"),
                Failure::Numerical(m) => eprintln!("error: {m}"),
            }
            f.code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("GBSDE_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => builder = builder.num_threads(n),
            _ => return Err(Failure::Config(format!("GBSDE_THREADS must be a positive integer, got `{v}`"))),
        }
    }
    builder.build().map_err(|e| Failure::Numerical(format!("cannot start worker threads: {e}")))
}

fn execute(cmd: &Command) -> Result<i32, Failure> {
    let started = Instant::now();
    let common = cmd.common();
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.mc.seed = seed;
        cfg.verify.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    if let Command::Verify { checks: Some(list), .. } = cmd {
        cfg.verify.checks = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if let Command::Convergence { levels, .. } = cmd {
        if *levels < 2 {
            return Err(Failure::Config(format!("convergence needs at least 2 levels, got {levels}")));
        }
    }
    let res = cfg.resolve()?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
    }
    let pool = thread_pool()?;
    let mut out = OutputDir::create(&cfg.output.dir)?;

    let outcome = pool.install(|| match cmd {
        Command::Solve(_) => solve(&cfg, &res, &mut out),
        Command::TwoEpoch(_) => two_epoch(&cfg, &res, &mut out),
        Command::Expect(_) => expect(&cfg, &res, &mut out),
        Command::Simulate(_) => simulate(&cfg, &res, &mut out),
        Command::Verify { .. } => verify(&cfg, &res, &mut out),
        Command::Convergence { levels, .. } => convergence(&cfg, &res, *levels, &mut out),
    })?;

    let mut written = out.written().to_vec();
    written.push("run_manifest.json".into());
    let manifest = json!({
        "command": cmd.name(),
        "config": serde_json::to_value(&cfg).expect("config serializes"),
        "seed": cfg.mc.seed,
        "grid": GridMeta::from(&res.grids),
        "versions": { "gbsde": env!("CARGO_PKG_VERSION") },
        "threads": pool.current_num_threads(),
        "wall_time_s": started.elapsed().as_secs_f64(),
        "outputs": written,
        "results": outcome.results,
        "pass": outcome.pass,
        "warnings": res.warnings,
    });
    out.write("run_manifest.json", &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))?;

    for (k, v) in &outcome.results {
        println!("{k} = {v}");
    }
    println!("outputs written to {}", out.root().display());
    Ok(if outcome.pass { 0 } else { 1 })
}

fn write_surfaces(cfg: &RunConfig, out: &mut OutputDir, sol: &crate::bsde::MarkovSolution, prefix: &str) -> Result<(), Failure> {
    if cfg.output.csv() {
        let rows = cfg.output.max_rows;
        out.write(&format!("{prefix}u.csv"), &output::surface_csv(&sol.u, "u", rows))?;
        out.write(&format!("{prefix}ux.csv"), &output::surface_csv(&sol.ux, "ux", rows))?;
        out.write(&format!("{prefix}uxx.csv"), &output::surface_csv(&sol.uxx, "uxx", rows))?;
    }
    Ok(())
}

fn write_reports(cfg: &RunConfig, out: &mut OutputDir, reports: &[VerifyReport]) -> Result<(), Failure> {
    if cfg.output.jsonl() {
        out.write("reports.jsonl", &output::reports_jsonl(reports))?;
    }
    Ok(())
}

fn solve(cfg: &RunConfig, res: &Resolved, out: &mut OutputDir) -> Result<Outcome, Failure> {
    let err = numerical(&res.trap);
    let (band, grids) = (&res.band, &res.grids);
    let sol = solve_markovian(&res.payoff, &res.generator, band, grids).map_err(&err)?;
    write_surfaces(cfg, out, &sol, "surfaces/")?;
    let mut o = Outcome::ok();
    o.set("y0", sol.y0());

    let n = cfg.mc.export_paths;
    if n > 0 {
        let control = cfg.open_control(band, grids.nt())?;
        let bang = BangBang { solution: &sol, generator: &res.generator, band: *band };
        let policy: &dyn VolPolicy = match &control {
            Some(c) => c,
            None => &bang,
        };
        let bundle = simulate_paths(policy, n, cfg.mc.seed, &grids.time).map_err(&err)?;
        let triple = extract_triple(&sol, &bundle, &res.generator, band).map_err(&err)?;
        let r = max_residual(&triple, &bundle, &res.generator, |p| terminal_value(&res.payoff, grids, p));
        o.set("max_residual", r);
        o.set("max_k_increment", triple.max_k_increment());
        o.set("path_exits", triple.exits);
        write_paths(cfg, out, &bundle, &triple)?;
    }
    Ok(o)
}

fn write_paths(cfg: &RunConfig, out: &mut OutputDir, bundle: &PathBundle, triple: &crate::bsde::SolutionTriple) -> Result<(), Failure> {
    if cfg.output.csv() {
        out.write("paths.csv", &output::paths_csv(bundle))?;
        out.write("triple.csv", &output::triple_csv(triple))?;
    }
    Ok(())
}

fn two_epoch(cfg: &RunConfig, res: &Resolved, out: &mut OutputDir) -> Result<Outcome, Failure> {
    let err = numerical(&res.trap);
    let problem = res.two_epoch.as_ref().ok_or_else(|| Failure::Config("two-epoch needs a [two_epoch] section".into()))?;
    let grids = &res.grids;
    let sol = solve_two_epoch(problem).map_err(&err)?;
    write_surfaces(cfg, out, &sol.epoch0, "surfaces/")?;
    let mut o = Outcome::ok();
    o.set("y0", sol.y0());
    o.set("k1", sol.k1);

    if cfg.output.csv() {
        let mut s = String::from("x,u\n");
        for (x, v) in grids.space.xs().iter().zip(&sol.frozen_values) {
            s += &format!("{x:?},{v:?}\n");
        }
        out.write("surfaces/frozen.csv", &s)?;
    }

    let n = cfg.mc.export_paths;
    if n > 0 {
        let control = cfg
            .open_control(&res.band, grids.nt())?
            .ok_or_else(|| Failure::Config("two-epoch paths need an open-loop mc.control".into()))?;
        let bundle = simulate_paths(&control, n, cfg.mc.seed, &grids.time).map_err(&err)?;
        let triple = sol.extract_triple(&bundle).map_err(&err)?;
        let r = max_residual(&triple, &bundle, &problem.generator, |p| sol.terminal_value(p));
        o.set("max_residual", r);
        o.set("max_k_increment", triple.max_k_increment());
        write_paths(cfg, out, &bundle, &triple)?;

        if cfg.output.csv() {
            // family members visited by the exported paths
            let mut members: Vec<usize> = bundle.paths.iter().map(|p| grids.space.nearest(p.b[sol.k1])).collect();
            members.sort_unstable();
            members.dedup();
            let mut listed = Vec::new();
            for &i in &members {
                let m = sol.member(i).map_err(&err)?;
                let file = format!("member_{i}.csv");
                out.write(&format!("surfaces/family/{file}"), &output::surface_csv(&m.u, "u", cfg.output.max_rows))?;
                listed.push(json!({ "index": i, "x": grids.space.x(i), "file": file }));
            }
            let manifest = json!({ "t1": grids.time.t(sol.k1), "k1": sol.k1, "members": listed });
            out.write("surfaces/family/manifest.json", &(serde_json::to_string_pretty(&manifest).unwrap() + "\n"))?;
        }
    }
    Ok(o)
}

fn expect(cfg: &RunConfig, res: &Resolved, out: &mut OutputDir) -> Result<Outcome, Failure> {
    let err = numerical(&res.trap);
    let (band, grids) = (&res.band, &res.grids);
    let payoff = match &res.expect {
        Some(p) => p.clone(),
        None => IncrementPayoff::terminal(res.payoff.clone(), grids.time.horizon).map_err(&err)?,
    };
    let lattice = g_expectation(&payoff, band, grids).map_err(&err)?;
    let mc = &cfg.mc;
    let family = control_family(band, grids.nt(), mc.candidates, mc.segments, mc.seed);
    let sup = sup_over_controls(&payoff, &Candidates::Explicit(family), band, &grids.time, mc.n_paths, mc.seed)
        .map_err(&err)?;
    let McEstimate { mean, stderr, .. } = sup.best;
    // every control's expectation is a lower bound of the G-expectation
    let report = VerifyReport::new("expect_dual_bound", mean - 3.0 * stderr - lattice, 0.0, cfg.verify.grid_tol, GridMeta::from(grids))
        .with("lattice", lattice)
        .with("mc_best_mean", mean)
        .with("mc_best_stderr", stderr)
        .with("mc_best_index", sup.best_index as f64)
        .with("n_paths", mc.n_paths as f64);
    write_reports(cfg, out, std::slice::from_ref(&report))?;
    let mut o = Outcome::ok();
    o.pass = report.pass;
    o.set("g_expectation", lattice);
    o.set("mc_best_mean", mean);
    o.set("mc_best_stderr", stderr);
    o.set("mc_best_control", sup.best_index);
    Ok(o)
}

fn simulate(cfg: &RunConfig, res: &Resolved, out: &mut OutputDir) -> Result<Outcome, Failure> {
    let err = numerical(&res.trap);
    let (band, grids) = (&res.band, &res.grids);
    let control = cfg.open_control(band, grids.nt())?;
    let sol;
    let bang;
    let policy: &dyn VolPolicy = match &control {
        Some(c) => c,
        None => {
            sol = solve_markovian(&res.payoff, &res.generator, band, grids).map_err(&err)?;
            bang = BangBang { solution: &sol, generator: &res.generator, band: *band };
            &bang
        }
    };
    let bundle = simulate_paths(policy, cfg.mc.n_paths, cfg.mc.seed, &grids.time).map_err(&err)?;
    let ends: Vec<f64> = bundle.paths.iter().map(|p| *p.b.last().unwrap()).collect();
    let squares: Vec<f64> = ends.iter().map(|b| b * b).collect();
    let qv: Vec<f64> = bundle.paths.iter().map(|p| *p.qv.last().unwrap()).collect();
    let mut o = Outcome::ok();
    o.set("control", policy.label());
    o.set("mean_B_T", McEstimate::from_samples(&ends).mean);
    o.set("mean_B_T_squared", McEstimate::from_samples(&squares).mean);
    o.set("stderr_B_T_squared", McEstimate::from_samples(&squares).stderr);
    o.set("mean_qv_T", McEstimate::from_samples(&qv).mean);
    if cfg.output.csv() {
        let shown = PathBundle {
            paths: bundle.paths.iter().take(cfg.mc.export_paths).cloned().collect(),
            ..bundle.clone()
        };
        out.write("paths.csv", &output::paths_csv(&shown))?;
    }
    Ok(o)
}

fn verify(cfg: &RunConfig, res: &Resolved, out: &mut OutputDir) -> Result<Outcome, Failure> {
    let reports = run_suite(&res.suite_problem(), &cfg.verify.checks, &cfg.verify_params()).map_err(numerical(&res.trap))?;
    write_reports(cfg, out, &reports)?;
    let mut o = Outcome::ok();
    for r in &reports {
        eprintln!(
            "{} {}: measured {:?}, bound {:?}, tolerance {:?}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.bound,
            r.tolerance
        );
        o.pass &= r.pass;
    }
    o.set("checks", reports.len());
    o.set("failed", reports.iter().filter(|r| !r.pass).map(|r| r.name.clone()).collect::<Vec<_>>());
    Ok(o)
}

fn convergence(cfg: &RunConfig, res: &Resolved, levels: u32, out: &mut OutputDir) -> Result<Outcome, Failure> {
    if cfg.open_control(&res.band, res.grids.nt())?.is_none() {
        return Err(Failure::Config("convergence needs an open-loop mc.control".into()));
    }
    let rows = convergence_table(cfg, res, levels).map_err(numerical(&res.trap))?;
    if cfg.output.csv() {
        out.write("convergence.csv", &output::convergence_csv(&rows))?;
    }
    let mut o = Outcome::ok();
    o.set("levels", rows.len());
    o.set("y0_finest", rows.last().map(|r| r.y0).unwrap_or(f64::NAN));
    o.set("max_residual_finest", rows.last().map(|r| r.max_residual).unwrap_or(f64::NAN));
    Ok(o)
}

/// Refinement study over `levels` grids (`Δx` halved and `Δt` quartered per
/// level). Residual paths are simulated once on the finest grid and
/// coarsened, so every level sees the same Brownian paths.
pub fn convergence_table(cfg: &RunConfig, res: &Resolved, levels: u32) -> crate::Result<Vec<ConvergenceRow>> {
    if levels < 2 {
        return Err(crate::Error::Domain(format!("convergence needs at least 2 levels, got {levels}")));
    }
    let grids: Vec<_> = (0..levels).map(|l| res.grids.refined(l)).collect();
    let work: f64 = grids.iter().map(|g| g.nx() as f64 * g.nt() as f64).sum();
    if work > CONVERGENCE_WORK_BUDGET {
        return Err(crate::Error::Budget(format!("refinement study needs {work:.3e} node-steps")));
    }
    let finest = grids.last().unwrap();
    let control = cfg
        .open_control(&res.band, finest.nt())
        .map_err(|e| crate::Error::Domain(e.0))?
        .ok_or_else(|| crate::Error::Domain("convergence needs an open-loop control".into()))?;
    let bundle = simulate_paths(&control, cfg.mc.residual_paths, cfg.mc.seed, &finest.time)?;

    let mut rows = Vec::with_capacity(levels as usize);
    for (l, g) in grids.iter().enumerate() {
        let factor = 1usize << (2 * (levels as usize - 1 - l));
        let paths: Vec<_> = bundle.paths.iter().map(|p| p.coarsen(factor)).collect();
        let (y0, per_path) = streamed_residuals(&res.payoff, &res.generator, &res.band, g, &paths)?;
        rows.push(ConvergenceRow {
            level: l as u32,
            nx: g.nx(),
            nt: g.nt(),
            y0,
            error: 0.0,
            max_residual: per_path.into_iter().fold(0.0, f64::max),
            order: None,
            order_dt: None,
        });
    }
    let y_fine = rows.last().unwrap().y0;
    for r in &mut rows {
        r.error = (r.y0 - y_fine).abs();
    }
    for l in 0..rows.len() - 1 {
        let (e0, e1) = (rows[l].error, rows[l + 1].error);
        if e0 > 0.0 && e1 > 0.0 {
            rows[l].order = Some((e0 / e1).log2());
            rows[l].order_dt = Some((e0 / e1).log2() / 2.0);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call_config(nx: usize) -> RunConfig {
        RunConfig::from_toml_str(&format!(
            "[band]\nsigma_lo = 0.5\nsigma_hi = 1.0\n[grid]\nnx = {nx}\n[payoff]\nkind = \"call\"\n[mc]\nresidual_paths = 8\n"
        ))
        .unwrap()
    }

    #[test]
    fn convergence_table_for_a_call() {
        let cfg = call_config(101);
        let res = cfg.resolve().unwrap();
        let rows = convergence_table(&cfg, &res, 3).unwrap();
        assert_eq!(rows.iter().map(|r| (r.nx, r.nt / rows[0].nt)).collect::<Vec<_>>(), [(101, 1), (201, 4), (401, 16)]);
        assert_eq!(rows[2].error, 0.0);
        assert!(rows[0].error > rows[1].error);
        // first order in Δt, i.e. second order in Δx at the fixed CFL ratio
        let p = rows[0].order_dt.unwrap();
        assert!((0.5..=1.5).contains(&p), "order per quartered dt {p}");
        assert!((rows[0].order.unwrap() - 2.0 * p).abs() < 1e-12);
        assert!(rows.windows(2).all(|w| w[1].max_residual < w[0].max_residual));
    }

    #[test]
    fn convergence_needs_two_levels_and_a_budget() {
        let cfg = call_config(101);
        let res = cfg.resolve().unwrap();
        assert!(matches!(convergence_table(&cfg, &res, 1), Err(crate::Error::Domain(_))));
        let cfg = call_config(4001);
        let res = cfg.resolve().unwrap();
        assert!(matches!(convergence_table(&cfg, &res, 4), Err(crate::Error::Budget(_))));
    }

    #[test]
    fn missing_arguments_exit_2() {
        assert_eq!(run(["gbsde"]), 2);
        assert_eq!(run(["gbsde", "solve"]), 2);
    }
}
