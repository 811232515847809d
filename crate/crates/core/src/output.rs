//! CSV tables and the run manifest.
//!
//! Numbers are written in fixed-point notation with 12 significant digits.
//! The manifest is a flat `key=value` text file listing the resolved
//! configuration, diagnostics and the SHA-256 of every emitted file; it is
//! always written last.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Trajectory;
use crate::limit::Mat3;
use crate::riccati::FollowerRiccati;
use crate::simulate::{CostReport, EpsilonRow, GapRecord, PopulationEnsemble};

pub const SIGNIFICANT_DIGITS: i32 = 12;

/// Fixed-point decimal with 12 significant digits; `-0` prints as `0`.
pub fn format_number(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let decimals = if x == 0.0 {
        (SIGNIFICANT_DIGITS - 1) as usize
    } else {
        (SIGNIFICANT_DIGITS - 1 - x.abs().log10().floor() as i32).max(0) as usize
    };
    let s = format!("{x:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

/// A CSV table held in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn nums(values: impl IntoIterator<Item = f64>) -> Vec<String> {
    values.into_iter().map(format_number).collect()
}

pub fn riccati_table(sol: &FollowerRiccati) -> Table {
    let mut t = Table::new(&["t", "P", "K", "Pi"]);
    for (k, time) in sol.p.grid().times().enumerate() {
        t.push(nums([time, *sol.p.node(k), *sol.k.node(k), *sol.pi.node(k)]));
    }
    t
}

pub const PHI_HEADER: [&str; 10] = [
    "t", "phi11", "phi12", "phi13", "phi21", "phi22", "phi23", "phi31", "phi32", "phi33",
];

pub fn phi_table(phi: &Trajectory<Mat3>) -> Table {
    let mut t = Table::new(&PHI_HEADER);
    for (k, time) in phi.grid().times().enumerate() {
        let m = phi.node(k);
        let mut row = vec![time];
        for i in 0..3 {
            for j in 0..3 {
                row.push(m[(i, j)]);
            }
        }
        t.push(nums(row));
    }
    t
}

pub fn epsilon_table(rows: &[EpsilonRow]) -> Table {
    let mut t = Table::new(&["N", "epsilon", "stderr", "n_paths"]);
    for r in rows {
        t.push(vec![
            r.population.to_string(),
            format_number(r.epsilon),
            format_number(r.stderr),
            r.n_paths.to_string(),
        ]);
    }
    t
}

pub fn costs_table(reports: &[CostReport]) -> Table {
    let mut t = Table::new(&["N", "J0", "J0_stderr", "Ji_mean", "Ji_stderr"]);
    for r in reports {
        let mut row = vec![r.population.to_string()];
        row.extend(nums([r.j0.mean, r.j0.stderr, r.ji_mean.mean, r.ji_mean.stderr]));
        t.push(row);
    }
    t
}

pub fn gaps_table(gaps: &[GapRecord]) -> Table {
    let mut t = Table::new(&["target", "direction", "delta", "gap"]);
    for g in gaps {
        t.push(vec![
            g.target.clone(),
            g.direction.to_string(),
            format_number(g.delta),
            format_number(g.gap),
        ]);
    }
    t
}

pub fn limit_paths_table(ensemble: &PopulationEnsemble) -> Table {
    let mut t = Table::new(&[
        "path", "t", "ybar0", "xbar", "psibar", "xbar0", "ybar", "phibar", "zbar0", "Vbar",
    ]);
    for (p, record) in ensemble.paths.iter().enumerate() {
        let l = &record.limit;
        for (k, time) in ensemble.grid.times().enumerate() {
            let mut row = vec![p.to_string()];
            row.extend(nums([
                time, l.y[k][0], l.y[k][1], l.y[k][2], l.x[k][0], l.x[k][1], l.x[k][2], l.z[k][0], l.z[k][2],
            ]));
            t.push(row);
        }
    }
    t
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Flat key-value record of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace `key`.
    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn set_number(&mut self, key: impl Into<String>, value: f64) {
        self.set(key, format_number(value));
    }

    pub fn set_check(&mut self, key: impl Into<String>, passed: bool) {
        self.set(key, if passed { "pass" } else { "fail" });
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { entries }
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Output directory that hashes every file it writes into the manifest.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    manifest: RunManifest,
}

impl ArtifactWriter {
    pub fn new(dir: impl AsRef<Path>, manifest: RunManifest) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir, manifest })
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<()> {
        let bytes = table.to_csv().into_bytes();
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.set(format!("file.{name}.sha256"), sha256_hex(&bytes));
        self.manifest.set(format!("file.{name}.rows"), table.len());
        Ok(())
    }

    /// Writes the manifest and returns it.
    pub fn finish(self) -> Result<RunManifest> {
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.render()).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}
