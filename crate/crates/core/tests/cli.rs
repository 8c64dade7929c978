use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
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
f = "0"
[mc]
n_paths = 200
export_paths = 4
[verify]
n_paths = 100
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn exec(&self, args: &[&str]) -> Output {
        self.exec_env(args, None)
    }

    fn exec_env(&self, args: &[&str], threads: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gbsde"));
        cmd.args(args).arg("--config").arg(self.dir.path().join("run.toml")).arg("--out").arg(self.out());
        match threads {
            Some(t) => cmd.env("GBSDE_THREADS", t),
            None => cmd.env_remove("GBSDE_THREADS"),
        };
        cmd.output().unwrap()
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.out().join(rel)).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value_at(csv: &str, t: &str, x: &str) -> f64 {
    let prefix = format!("{t},{x},");
    csv.lines().find_map(|l| l.strip_prefix(&prefix)).unwrap().parse().unwrap()
}

#[test]
fn solve_writes_surfaces_paths_and_manifest() {
    let run = Run::new(BASE);
    let o = run.exec(&["solve"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let u = run.read("surfaces/u.csv");
    assert!(u.starts_with("t,x,u\n"));
    assert!((value_at(&u, "0.0", "0.0") - 1.0).abs() < 1e-6);
    assert!(run.read("surfaces/uxx.csv").starts_with("t,x,uxx\n"));
    assert!(run.read("paths.csv").starts_with("path,k,t,B,qv\n"));
    let triple = run.read("triple.csv");
    assert!(triple.starts_with("path,k,t,Y,Z,K\n"));
    assert_eq!(triple.lines().count(), run.read("paths.csv").lines().count());
    assert!(triple.lines().skip(1).all(|l| l.split(',').count() == 6));
    let manifest: serde_json::Value = serde_json::from_str(&run.read("run_manifest.json")).unwrap();
    assert_eq!(manifest["command"], "solve");
    assert_eq!(manifest["config"]["band"]["sigma_hi"], 1.0);
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn seed_flag_changes_paths_only() {
    let run = Run::new(BASE);
    assert_eq!(code(&run.exec(&["solve"])), 0);
    let (u0, p0) = (run.read("surfaces/u.csv"), run.read("paths.csv"));
    assert_eq!(code(&run.exec(&["solve", "--seed", "9"])), 0);
    assert_eq!(run.read("surfaces/u.csv"), u0);
    assert_ne!(run.read("paths.csv"), p0);
}

#[test]
fn usage_errors_exit_2() {
    let run = Run::new(BASE);
    let o = Command::new(env!("CARGO_BIN_EXE_gbsde")).arg("frobnicate").output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"));
    for flag in ["--help", "--version"] {
        let o = Command::new(env!("CARGO_BIN_EXE_gbsde")).arg(flag).output().unwrap();
        assert_eq!(code(&o), 0);
    }
    let o = run.exec(&["convergence", "--levels", "1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run.exec_env(&["solve"], Some("many"));
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_configs_exit_2() {
    for (from, to, needle) in [
        ("nx = 101", "nx = 101\ncolumns = 4", "columns"),
        ("nx = 101", "nx = 101\nnt = 10", "CFL"),
        ("sigma_lo = 0.5", "sigma_lo = -0.5", "band"),
        ("expr = \"x^2\"", "expr = \"x^2 +* 1\"", "column 6"),
        ("f = \"0\"", "f = \"tanh(y)\"", "lipschitz"),
    ] {
        let run = Run::new(&BASE.replace(from, to));
        let o = run.exec(&["solve"]);
        assert_eq!(code(&o), 2, "{to}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{to}: {}", stderr(&o));
    }
}

#[test]
fn evaluation_errors_exit_3_with_a_span() {
    let run = Run::new(&BASE.replace("expr = \"x^2\"", "expr = \"1/(x-x)\""));
    let o = run.exec(&["solve"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("payoff.expr") && err.contains("column 2"), "{err}");
}

#[test]
fn failing_checks_exit_1() {
    // a false Lipschitz claim: warned at load, then caught by the check
    let run = Run::new(&BASE.replace("lipschitz = 12.0", "lipschitz = 1.0"));
    let o = run.exec(&["verify", "--checks", "lipschitz,decreasing"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    let reports = run.read("reports.jsonl");
    let lines: Vec<serde_json::Value> = reports.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["name"], "check_decreasing");
    assert_eq!(lines[0]["pass"], true);
    assert_eq!(lines[1]["name"], "check_lipschitz");
    assert_eq!(lines[1]["pass"], false);
    for key in ["measured", "bound", "tolerance"] {
        assert!(lines[1][key].is_number());
    }
}

#[test]
fn expect_reports_the_dual_bound() {
    let run = Run::new(&BASE.replace("expr = \"x^2\"\nlipschitz = 12.0", "").replace("kind = \"expression\"", "kind = \"butterfly\""));
    let o = run.exec(&["expect"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(run.read("reports.jsonl").trim()).unwrap();
    assert_eq!(report["name"], "expect_dual_bound");
    assert_eq!(report["pass"], true);

    let multi = format!("{BASE}\n[expect]\ntimes = [0.5, 1.0]\nphi = \"x^2 + y^2\"\n");
    let run = Run::new(&multi);
    let o = run.exec(&["expect"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("g_expectation = 0.99999"));
}

#[test]
fn two_epoch_exports_the_family() {
    let run = Run::new(&format!("{BASE}\n[two_epoch]\nt1 = 0.5\npsi = \"x^2 + y^2\"\n"));
    let o = run.exec(&["two-epoch"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(run.read("surfaces/frozen.csv").starts_with("x,u\n"));
    let family: serde_json::Value = serde_json::from_str(&run.read("surfaces/family/manifest.json")).unwrap();
    let members = family["members"].as_array().unwrap();
    assert!(!members.is_empty());
    let file = members[0]["file"].as_str().unwrap();
    assert!(run.read(&format!("surfaces/family/{file}")).starts_with("t,x,u\n"));
    assert!(Path::new(&run.out().join("triple.csv")).exists());
}

#[test]
fn simulate_and_convergence() {
    let run = Run::new(&BASE.replace("n_paths = 200", "n_paths = 200\ncontrol = \"bang-bang\""));
    let o = run.exec(&["simulate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let paths = run.read("paths.csv");
    assert_eq!(paths.lines().filter(|l| l.starts_with("0,")).count(), paths.lines().filter(|l| l.starts_with("3,")).count());
    // bang-bang has no fixed open-loop path set to refine
    assert_eq!(code(&run.exec(&["convergence", "--levels", "2"])), 2);

    let run = Run::new(BASE);
    let o = run.exec_env(&["convergence", "--levels", "2"], Some("1"));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = run.read("convergence.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("level,nx,nt,y0,error,max_residual,order,order_dt"));
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        // the scheme is exact on quadratics away from the boundary
        assert!(cells[4].parse::<f64>().unwrap() < 1e-8, "{line}");
    }
}
