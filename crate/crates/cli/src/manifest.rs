//! Run manifest and the `--verify` checks on an output directory.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::run::Check;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Versions {
    pub core: String,
    pub cli: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl From<&Check> for CheckRecord {
    fn from(c: &Check) -> Self {
        Self { name: c.name.clone(), passed: c.passed, detail: c.detail.clone() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config: ConfigRef,
    pub seeds: Vec<u64>,
    /// Set when `--seed` replaced the config's root seed.
    pub seed_override: Option<u64>,
    pub versions: Versions,
    pub outputs: Vec<OutputFile>,
    pub wall_time_s: f64,
    pub checks: Vec<CheckRecord>,
    /// `ok` or `checks_failed`.
    pub status: String,
    #[serde(default)]
    pub summary: Value,
}

impl Manifest {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn versions() -> Versions {
    Versions { core: pilotwave_core::VERSION.into(), cli: env!("CARGO_PKG_VERSION").into() }
}

/// Every problem found in `dir`; empty means the directory verifies.
pub fn verify(dir: &Path) -> Vec<String> {
    let mut problems = Vec::new();
    let text = match std::fs::read_to_string(dir.join(MANIFEST)) {
        Ok(t) => t,
        Err(e) => return vec![format!("cannot read {}: {e}", dir.join(MANIFEST).display())],
    };
    let manifest: Manifest = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => return vec![format!("{MANIFEST}: {e}")],
    };
    if manifest.outputs.is_empty() {
        problems.push(format!("{MANIFEST} lists no outputs"));
    }
    for o in &manifest.outputs {
        let path = dir.join(&o.file);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                problems.push(format!("{}: {e}", o.file));
                continue;
            }
        };
        if bytes.is_empty() {
            problems.push(format!("{}: empty file", o.file));
            continue;
        }
        if bytes.len() as u64 != o.bytes || sha256_hex(&bytes) != o.sha256 {
            problems.push(format!("{}: contents do not match the recorded hash", o.file));
        }
        match std::str::from_utf8(&bytes) {
            Ok(text) => problems.extend(csv_invariants(&o.file, text)),
            Err(_) => problems.push(format!("{}: not UTF-8", o.file)),
        }
    }
    problems
}

struct Table<'a> {
    header: Vec<&'a str>,
    /// `(line number, fields)`; line numbers are 1-based in the file.
    rows: Vec<(usize, Vec<&'a str>)>,
}

impl<'a> Table<'a> {
    fn parse(text: &'a str) -> Option<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next()?.1.split(',').map(str::trim).collect();
        let rows = lines.map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect())).collect();
        Some(Self { header, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| *h == name)
    }

    /// Values of column `name` with their line numbers; unparsable cells become NaN.
    fn values(&self, name: &str) -> Vec<(usize, f64)> {
        let Some(c) = self.column(name) else { return Vec::new() };
        self.rows
            .iter()
            .map(|(line, f)| (*line, f.get(c).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)))
            .collect()
    }
}

fn require(file: &str, table: &Table, name: &str, ok: impl Fn(f64) -> bool, what: &str, out: &mut Vec<String>) {
    for (line, v) in table.values(name) {
        if !ok(v) {
            out.push(format!("{file}:{line}: {name} = {v} violates {what}"));
        }
    }
}

fn stem(file: &str) -> &str {
    file.strip_suffix(".csv").unwrap_or(file)
}

/// Invariants a well-formed output must satisfy, keyed on the file name.
pub fn csv_invariants(file: &str, text: &str) -> Vec<String> {
    let mut out = Vec::new();
    if !file.ends_with(".csv") {
        return out;
    }
    let Some(t) = Table::parse(text) else {
        return vec![format!("{file}: no header line")];
    };
    if let Some((line, _)) = t.rows.iter().find(|(_, f)| f.len() != t.header.len()) {
        out.push(format!("{file}:{line}: expected {} fields", t.header.len()));
        return out;
    }
    let nonneg = |v: f64| v >= 0.0;
    match stem(file) {
        "hbar" | "mode_hbar" => require(file, &t, "hbar", |v| v >= -1e-12, "hbar >= 0", &mut out),
        s if s.starts_with("density_") => {
            require(file, &t, "rho", nonneg, "rho >= 0", &mut out);
            require(file, &t, "psi2", nonneg, "psi2 >= 0", &mut out);
            let sum = |c: &str| t.values(c).iter().map(|v| v.1).sum::<f64>();
            let (r, p) = (sum("rho"), sum("psi2"));
            if (r - p).abs() > 1e-6 * p.abs().max(1e-300) {
                out.push(format!("{file}: rho sums to {r}, psi2 to {p}"));
            }
        }
        "xi" => require(file, &t, "xi", nonneg, "xi >= 0", &mut out),
        "spectrum" => {
            require(file, &t, "p_qt", nonneg, "p_qt >= 0", &mut out);
            require(file, &t, "p_r", nonneg, "p_r >= 0", &mut out);
        }
        "scaling" => require(file, &t, "tau", |v| v > 0.0, "tau > 0", &mut out),
        "tau_bh" => require(file, &t, "tau_over_tP", |v| v > 0.0, "tau > 0", &mut out),
        "momentum" => require(file, &t, "outcome", |v| v == 1.0 || v == -1.0, "outcome in {-1, +1}", &mut out),
        "epr" => {
            for c in ["outcome_A_B", "outcome_A_Bprime"] {
                require(file, &t, c, |v| v == 1.0 || v == -1.0, "outcome in {-1, +1}", &mut out);
            }
        }
        "subq" => {
            let (x0, xh, b) = (t.values("x0"), t.values("x_hat"), t.values("bound"));
            for ((line, x0), ((_, xh), (_, b))) in x0.into_iter().zip(xh.into_iter().zip(b)) {
                if !((xh - x0).abs() <= b) {
                    out.push(format!("{file}:{line}: |x_hat - x0| = {} exceeds bound {b}", (xh - x0).abs()));
                }
            }
        }
        _ => {}
    }
    out
}
