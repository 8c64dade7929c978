//! Artifact writers. Every float is written with `{:?}`, the shortest text
//! that parses back to the same value, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path as FsPath, PathBuf};

use serde::Serialize;

use crate::bsde::SolutionTriple;
use crate::expectation::PathBundle;
use crate::pde::ValueSurface;
use crate::verify::VerifyReport;

/// Time rows kept when at most `max_rows` of `nt + 1` may be written: a
/// uniform stride from `0`, always including `nt`.
pub fn row_selection(nt: usize, max_rows: usize) -> Vec<usize> {
    let stride = nt.div_ceil(max_rows.max(2) - 1).max(1);
    let mut rows: Vec<usize> = (0..=nt).step_by(stride).collect();
    if rows.last() != Some(&nt) {
        rows.push(nt);
    }
    rows
}

/// Long-format surface CSV with header `t,x,<column>`.
pub fn surface_csv(surface: &ValueSurface, column: &str, max_rows: usize) -> String {
    let xs = surface.space().xs();
    let mut s = format!("t,x,{column}\n");
    for k in row_selection(surface.nt(), max_rows) {
        let t = surface.t(k);
        for (x, v) in xs.iter().zip(surface.row(k)) {
            let _ = writeln!(s, "{t:?},{x:?},{v:?}");
        }
    }
    s
}

pub fn paths_csv(bundle: &PathBundle) -> String {
    let mut s = String::from("path,k,t,B,qv\n");
    for (i, p) in bundle.paths.iter().enumerate() {
        for (k, (b, qv)) in p.b.iter().zip(&p.qv).enumerate() {
            let _ = writeln!(s, "{i},{k},{:?},{b:?},{qv:?}", bundle.time.t(k));
        }
    }
    s
}

/// A missing `Z` entry is written as an empty cell.
pub fn triple_csv(triple: &SolutionTriple) -> String {
    let mut s = String::from("path,k,t,Y,Z,K\n");
    for (i, p) in triple.paths.iter().enumerate() {
        for (k, (y, kk)) in p.y.iter().zip(&p.k).enumerate() {
            let t = triple.time.t(k);
            match p.z.get(k) {
                Some(z) => writeln!(s, "{i},{k},{t:?},{y:?},{z:?},{kk:?}"),
                None => writeln!(s, "{i},{k},{t:?},{y:?},,{kk:?}"),
            }
            .expect("writing to a String");
        }
    }
    s
}

pub fn reports_jsonl(reports: &[VerifyReport]) -> String {
    reports.iter().map(|r| r.to_json_line() + "\n").collect()
}

/// One row of the refinement study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub level: u32,
    pub nx: usize,
    pub nt: usize,
    pub y0: f64,
    /// `|Y₀ − Y₀ at the finest level|`.
    pub error: f64,
    pub max_residual: f64,
    /// `log₂(e_ℓ / e_{ℓ+1})`, per halving of `Δx`.
    pub order: Option<f64>,
    /// `log₄(e_ℓ / e_{ℓ+1})`, per quartering of `Δt`.
    pub order_dt: Option<f64>,
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let cell = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    let mut s = String::from("level,nx,nt,y0,error,max_residual,order,order_dt\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:?},{:?},{:?},{},{}",
            r.level,
            r.nx,
            r.nt,
            r.y0,
            r.error,
            r.max_residual,
            cell(r.order),
            cell(r.order_dt)
        );
    }
    s
}

/// Writes files under one output directory, creating parents as needed.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &FsPath) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &FsPath {
        &self.root
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> io::Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        self.written.push(rel.to_string());
        Ok(())
    }

    /// Relative paths written so far, in order.
    pub fn written(&self) -> &[String] {
        &self.written
    }
}
