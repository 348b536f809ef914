//! Command-line driver: config loading, experiment pipelines, manifests.
//!
//! Exit codes: 0 success, 2 bad config or arguments, 3 numerical failure,
//! 4 a self-check failed (outputs and manifest are still written),
//! 5 `--verify` found a problem.

pub mod config;
pub mod manifest;
pub mod run;

use clap::Parser;
use std::path::{Path, PathBuf};
use std::time::Instant;

use manifest::{CheckRecord, ConfigRef, Manifest, OutputFile, MANIFEST};
use run::Experiment;

#[derive(Debug, Parser)]
#[command(name = "pilotwave", version, about = "Pilot-wave relaxation and measurement experiments")]
pub struct Cli {
    /// Experiment to run; omit together with --verify to only check an output directory.
    #[arg(value_enum)]
    pub experiment: Option<Experiment>,
    /// TOML config with a [common] block and the experiment's table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Replaces the config's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Check hashes and CSV invariants in the output directory.
    #[arg(long)]
    pub verify: bool,
}

fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> std::io::Result<Vec<OutputFile>> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    for (name, bytes) in files {
        std::fs::write(dir.join(name), bytes)?;
        records.push(OutputFile { file: name.clone(), sha256: manifest::sha256_hex(bytes), bytes: bytes.len() as u64 });
    }
    Ok(records)
}

fn run_experiment(cli: &Cli, exp: Experiment) -> i32 {
    let Some(path) = &cli.config else {
        eprintln!("error: --config is required to run an experiment");
        return 2;
    };
    let mut loaded = match config::load(path) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Some(s) = cli.seed {
        loaded.config.common.seed = s;
    }
    let start = Instant::now();
    let output = match run::run(exp, &loaded) {
        Ok(o) => o,
        Err(f) => {
            eprintln!("error: {}", f.message());
            return f.exit_code();
        }
    };
    let wall = start.elapsed().as_secs_f64();
    let outputs = match write_outputs(&cli.out, &output.files) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot write outputs to {}: {e}", cli.out.display());
            return 2;
        }
    };
    let checks: Vec<CheckRecord> = output.checks.iter().map(CheckRecord::from).collect();
    let passed = checks.iter().all(|c| c.passed);
    let m = Manifest {
        experiment: exp.name().into(),
        config: ConfigRef { path: path.display().to_string(), sha256: manifest::sha256_hex(&loaded.bytes) },
        seeds: output.seeds,
        seed_override: cli.seed,
        versions: manifest::versions(),
        outputs,
        wall_time_s: wall,
        checks,
        status: if passed { "ok" } else { "checks_failed" }.into(),
        summary: output.summary,
    };
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    if let Err(e) = std::fs::write(cli.out.join(MANIFEST), json + "\n") {
        eprintln!("error: cannot write manifest: {e}");
        return 2;
    }
    for c in m.checks.iter().filter(|c| !c.passed) {
        eprintln!("check failed: {}: {}", c.name, c.detail);
    }
    if passed {
        0
    } else {
        4
    }
}

fn run_verify(dir: &Path) -> i32 {
    let problems = manifest::verify(dir);
    for p in &problems {
        eprintln!("verify: {p}");
    }
    if problems.is_empty() {
        println!("verify: {} ok", dir.display());
        0
    } else {
        5
    }
}

/// Runs the parsed command and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    if cli.threads > 0 {
        // a pool built earlier in the process (tests) keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let code = match cli.experiment {
        Some(exp) => run_experiment(&cli, exp),
        None if cli.verify => return run_verify(&cli.out),
        None => {
            eprintln!("error: name an experiment or pass --verify");
            return 2;
        }
    };
    if cli.verify && (code == 0 || code == 4) {
        let v = run_verify(&cli.out);
        if v != 0 {
            return v;
        }
    }
    code
}
