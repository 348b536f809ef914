//! One pipeline per subcommand. Pipelines render every output into memory;
//! nothing touches the output directory until the whole run has succeeded.

use serde::Serialize;
use serde_json::{json, Value};
use std::io::Write;

use pilotwave_core::cosmo::{self, XiCurve, XiPoint, XiSource};
use pilotwave_core::experiments::{self, DiscriminationSetup, MomentumEnsemble, OscWave1d, SystemEnsemble};
use pilotwave_core::fit::XiFit;
use pilotwave_core::mini::{self, BlackHoleParams, MiniWave};
use pilotwave_core::relaxation::{self, CoarseGraining, Contracted, DensityFn, Equilibrium};
use pilotwave_core::{Error, VelocityField};

use crate::config::{Config, InitialDensity, Loaded, MiniWaveInput, XiInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    Relax,
    Scaling,
    Mode,
    Xi,
    Spectrum,
    Mini,
    Taubh,
    Branch,
    Momentum,
    Subq,
    Epr,
    Discriminate,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Relax => "relax",
            Experiment::Scaling => "scaling",
            Experiment::Mode => "mode",
            Experiment::Xi => "xi",
            Experiment::Spectrum => "spectrum",
            Experiment::Mini => "mini",
            Experiment::Taubh => "taubh",
            Experiment::Branch => "branch",
            Experiment::Momentum => "momentum",
            Experiment::Subq => "subq",
            Experiment::Epr => "epr",
            Experiment::Discriminate => "discriminate",
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    /// Unusable config or arguments.
    Config(String),
    /// A module operation returned an error.
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) => m,
        }
    }
}

/// Labels a core error with the operation that raised it. Bad parameters
/// caught by the core's own validation count as config errors.
fn op(name: &'static str) -> impl Fn(Error) -> Failure {
    move |e| match e {
        Error::InvalidInput(m) => Failure::Config(format!("{name}: {m}")),
        other => Failure::Numerical(format!("{name}: {other}")),
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

#[derive(Default)]
pub struct Output {
    pub files: Vec<(String, Vec<u8>)>,
    pub checks: Vec<Check>,
    pub seeds: Vec<u64>,
    pub summary: Value,
}

impl Output {
    fn csv(&mut self, name: impl Into<String>, render: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) {
        let mut buf = Vec::new();
        render(&mut buf).expect("writing to memory cannot fail");
        self.files.push((name.into(), buf));
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check::new(name, passed, detail));
    }
}

fn table<'a, T>(t: &'a Option<T>, exp: Experiment) -> Result<&'a T, Failure> {
    t.as_ref().ok_or_else(|| config_err(format!("config has no [{}] table", exp.name())))
}

fn uniform(t_end: f64, samples: usize) -> Result<Vec<f64>, Failure> {
    if samples < 2 || !(t_end > 0.0 && t_end.is_finite()) {
        return Err(config_err("need samples >= 2 and a positive t_end"));
    }
    Ok((0..samples).map(|k| t_end * k as f64 / (samples - 1) as f64).collect())
}

pub fn run(exp: Experiment, loaded: &Loaded) -> Result<Output, Failure> {
    let cfg = &loaded.config;
    cfg.common.integrator.validate().map_err(op("integrator"))?;
    let mut out = Output { seeds: vec![cfg.common.seed], ..Default::default() };
    match exp {
        Experiment::Relax => relax(cfg, &mut out)?,
        Experiment::Scaling => scaling(cfg, &mut out)?,
        Experiment::Mode => mode(cfg, &mut out)?,
        Experiment::Xi => xi(cfg, &mut out)?,
        Experiment::Spectrum => spectrum(loaded, &mut out)?,
        Experiment::Mini => mini_run(cfg, &mut out)?,
        Experiment::Taubh => taubh(cfg, &mut out)?,
        Experiment::Branch => branch(cfg, &mut out)?,
        Experiment::Momentum => momentum(cfg, &mut out)?,
        Experiment::Subq => subq(cfg, &mut out)?,
        Experiment::Epr => epr(cfg, &mut out)?,
        Experiment::Discriminate => discriminate(cfg, &mut out)?,
    }
    Ok(out)
}

fn relax(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.relax, Experiment::Relax)?;
    let mut spec = t.wave.clone();
    if spec.levels.is_some() && spec.seed.is_none() {
        spec.seed = Some(cfg.common.seed);
    }
    let wave = spec.build().map_err(op("psi::build"))?;
    let field = VelocityField::new(&wave);
    let times = uniform(t.t_end, t.samples)?;
    if let Some(&bad) = t.snapshots.iter().find(|&&i| i >= times.len()) {
        return Err(config_err(format!("snapshot index {bad} is past the last sample")));
    }
    let cg = CoarseGraining { eps: t.eps };
    let rho0: Box<dyn DensityFn + '_> = match &t.initial {
        InitialDensity::Gaussian { center, sigma } => {
            Box::new(relaxation::gaussian_initial(*center, *sigma).map_err(op("relaxation::gaussian_initial"))?)
        }
        InitialDensity::Equilibrium => Box::new(Equilibrium { wave: &wave, t: 0.0 }),
        InitialDensity::Contracted { factor, center } => {
            if !(*factor > 0.0) {
                return Err(config_err("contraction factor must be positive"));
            }
            Box::new(Contracted { inner: Equilibrium { wave: &wave, t: 0.0 }, center: *center, factor: *factor })
        }
        InitialDensity::BoxGround => Box::new(relaxation::box_ground_density),
    };
    let mut snaps = Vec::new();
    let mut series = relaxation::hbar_series(&wave, &field, &*rho0, &t.grid, &cg, &times, &cfg.common.integrator, |k, f| {
        if t.snapshots.contains(&k) {
            let mut buf = Vec::new();
            f.write_csv(&mut buf).expect("in-memory write");
            snaps.push((format!("density_{k:03}.csv"), buf));
        }
        Ok(())
    })
    .map_err(op("relaxation::hbar_series"))?;
    let fit = series.fit().map_err(op("fit::fit_exponential"))?.clone();
    out.csv("hbar.csv", |w| series.write_csv(w));
    out.files.extend(snaps);
    let min_h = series.values().into_iter().fold(f64::INFINITY, f64::min);
    out.check("hbar_nonnegative", min_h >= -1e-12, format!("min hbar = {min_h:e}"));
    let margin = series.monotonicity_margin();
    out.check("hbar_nonincreasing_within_3err", !(margin > 1.0), format!("largest rise / 3 err = {margin:.4}"));
    out.summary = json!({
        "modes": wave.len(),
        "energy_spread": wave.energy_spread().0,
        "quantum_timescale": wave.energy_spread().1,
        "tau": fit.tau(),
        "tau_err": fit.tau_err(),
        "fit": fit,
        "max_err": series.max_err(),
        "h_theorem_margin": series.h_theorem_margin(),
        "monotonicity_margin": margin,
    });
    Ok(())
}

fn scaling(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.scaling, Experiment::Scaling)?;
    let seeds = if t.seeds.is_empty() { vec![cfg.common.seed] } else { t.seeds.clone() };
    out.seeds = seeds.clone();
    let sc = relaxation::ScalingConfig {
        m_list: t.m_list.clone(),
        n: t.n,
        cells: t.cells,
        t_end: t.t_end,
        samples: t.samples,
        seeds,
        integrator: cfg.common.integrator,
    };
    let study = relaxation::scaling_study(&sc).map_err(op("relaxation::scaling_study"))?;
    out.csv("scaling.csv", |w| study.write_csv(w));
    let finite = study.points.iter().all(|p| p.tau.is_finite() && p.tau > 0.0);
    out.check("tau_positive_finite", finite, format!("{} values of M", study.points.len()));
    out.summary = json!({
        "strictly_decreasing": study.strictly_decreasing(),
        "loglog_slope": study.loglog_slope,
        "spearman_tau_inv_m": study.rank_corr_inv_m,
        "points": study.points,
    });
    Ok(())
}

fn mode_settings(settings: &cosmo::ModeRelaxConfig, seed: u64) -> cosmo::ModeRelaxConfig {
    cosmo::ModeRelaxConfig { seed, ..settings.clone() }
}

fn mode(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.mode, Experiment::Mode)?;
    let m = t.mode().map_err(op("cosmo::ExpandingMode"))?;
    let run = cosmo::mode_relax(&m, &mode_settings(&t.settings, cfg.common.seed)).map_err(op("cosmo::mode_relax"))?;
    out.csv("mode_hbar.csv", |w| run.series.write_csv(w));
    out.csv("mode_variance.csv", |w| {
        writeln!(w, "t,var_noneq,var_eq")?;
        for (e, (a, b)) in run.series.entries.iter().zip(run.var_noneq.iter().zip(&run.var_eq)) {
            writeln!(w, "{},{},{}", fmt(e.t), fmt(*a), fmt(*b))?;
        }
        Ok(())
    });
    let span = run.series.entries.last().unwrap().t - run.series.entries[0].t;
    let drift_rate = run.norm_drift / span;
    out.check("grid_norm_drift_per_unit_time", drift_rate < 1e-8, format!("{drift_rate:e}"));
    out.summary = mode_summary(&run);
    Ok(())
}

fn mode_summary(run: &cosmo::ModeRun) -> Value {
    json!({
        "k": run.k,
        "lambda_over_hubble_start": run.lambda_over_hubble_start,
        "lambda_over_hubble_end": run.lambda_over_hubble_end,
        "xi": run.xi(),
        "xi_err": run.xi_err,
        "hbar_ratio": run.hbar_ratio(),
        "norm_drift": run.norm_drift,
        "max_edge_ratio": run.max_edge_ratio,
        "grid_steps": run.grid_steps,
    })
}

fn xi(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.xi, Experiment::Xi)?;
    if t.n_modes < 3 || !(t.ratio_lo > 0.0 && t.ratio_hi > t.ratio_lo) {
        return Err(config_err("xi band needs n_modes >= 3 and 0 < ratio_lo < ratio_hi"));
    }
    let settings = mode_settings(&t.settings, cfg.common.seed);
    let mut runs = Vec::new();
    for k in cosmo::k_band(t.a0, t.t0, t.ratio_lo, t.ratio_hi, t.n_modes) {
        let m = cosmo::ExpandingMode::new(k, t.a0, t.t0).map_err(op("cosmo::ExpandingMode"))?;
        runs.push(cosmo::mode_relax(&m, &settings).map_err(op("cosmo::mode_relax"))?);
    }
    let mut curve = cosmo::xi_of_k(&runs).map_err(op("cosmo::xi_of_k"))?;
    let fit = curve.fit().map_err(op("fit::fit_xi"))?.clone();
    out.csv("xi.csv", |w| curve.write_csv(w));
    out.csv("xi_modes.csv", |w| {
        writeln!(w, "k,lambda_over_hubble_start,hbar_start,hbar_end,hbar_ratio,norm_drift")?;
        for r in &runs {
            let e = &r.series.entries;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                fmt(r.k),
                fmt(r.lambda_over_hubble_start),
                fmt(e[0].hbar),
                fmt(e.last().unwrap().hbar),
                fmt(r.hbar_ratio()),
                fmt(r.norm_drift)
            )?;
        }
        Ok(())
    });
    let worst = runs.iter().map(|r| r.norm_drift).fold(0.0, f64::max);
    out.check("grid_norm_drift", worst < 1e-8 * settings.t1.max(1.0), format!("worst {worst:e}"));
    let long = runs.first().unwrap().series.entries.last().unwrap().hbar;
    let short = runs.last().unwrap().series.entries.last().unwrap().hbar;
    out.summary = json!({
        "isotonic_residual": curve.isotonic_residual(),
        "fit": fit,
        "final_hbar_long_over_short": long / short,
        "modes": runs.iter().map(mode_summary).collect::<Vec<_>>(),
    });
    Ok(())
}

/// Reads the `k` and `xi` columns of a CSV, skipping `#` lines.
fn read_xi_table(path: &std::path::Path) -> Result<XiCurve, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| config_err(format!("{} is empty", path.display())))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| h.trim() == name).ok_or_else(|| config_err(format!("{} has no `{name}` column", path.display())));
    let (ck, cx) = (col("k")?, col("xi")?);
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let num = |c: usize| {
            f.get(c).and_then(|v| v.trim().parse::<f64>().ok()).ok_or_else(|| config_err(format!("{}: bad row {}", path.display(), i + 2)))
        };
        points.push(XiPoint { k: num(ck)?, xi: num(cx)?, xi_err: f64::NAN, lambda_over_hubble_start: f64::NAN });
    }
    if points.is_empty() {
        return Err(config_err(format!("{} has no rows", path.display())));
    }
    points.sort_by(|a, b| a.k.total_cmp(&b.k));
    Ok(XiCurve { points, fit: None })
}

fn spectrum(loaded: &Loaded, out: &mut Output) -> Result<(), Failure> {
    let t = table(&loaded.config.spectrum, Experiment::Spectrum)?;
    let mut ks = t.ks.clone();
    if let Some(b) = &t.band {
        ks.extend(cosmo::k_band(b.a0, b.t0, b.ratio_lo, b.ratio_hi, b.n));
    }
    if ks.is_empty() || ks.iter().any(|k| !(*k > 0.0)) {
        return Err(config_err("spectrum needs positive wavenumbers (`ks` or `band`)"));
    }
    if !(t.p_qt.amplitude > 0.0 && t.p_qt.pivot > 0.0) {
        return Err(config_err("power law needs positive amplitude and pivot"));
    }
    let fitted;
    let table_curve;
    let source = match &t.xi {
        XiInput::Fitted { c1, c2, c3 } => {
            fitted = XiFit {
                c1: *c1,
                c2: *c2,
                c3: *c3,
                covariance: [[f64::NAN; 3]; 3],
                rss: f64::NAN,
                r_squared: f64::NAN,
                residuals: Vec::new(),
                degenerate: false,
            };
            XiSource::Fitted(&fitted)
        }
        XiInput::Table { path } => {
            table_curve = read_xi_table(&loaded.resolve(path))?;
            XiSource::Tabulated(&table_curve)
        }
        XiInput::Unity => XiSource::Unity,
    };
    let s = cosmo::spectrum_deficit(|k| t.p_qt.eval(k), &ks, &source);
    out.csv("spectrum.csv", |w| s.write_csv(w));
    let nonneg = s.rows.iter().all(|r| r.1 >= 0.0 && r.2 >= 0.0);
    out.check("spectra_nonnegative", nonneg, format!("{} wavenumbers", s.rows.len()));
    out.summary = json!({ "deficit_monotone": s.deficit_monotone });
    Ok(())
}

fn mini_run(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.mini, Experiment::Mini)?;
    let wave = match &t.wave {
        MiniWaveInput::Components { m_p, components } => MiniWave::new(*m_p, components.clone()),
        MiniWaveInput::Packets { m_p, k0, sigma, nodes, minus_weight } => {
            MiniWave::bounce_packets(*m_p, *k0, *sigma, *nodes, *minus_weight)
        }
    }
    .map_err(op("mini::MiniWave"))?;
    if t.starts.is_empty() {
        return Err(config_err("mini needs at least one start"));
    }
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for (i, s) in t.starts.iter().enumerate() {
        let tr = mini::integrate_mini(&wave, s[0], s[1], [t.t0, t.t_end], &cfg.common.integrator, t.a_min)
            .map_err(op("mini::integrate_mini"))?;
        for p in &tr.samples {
            worst = worst.max(mini::wd_residual(&wave, p.a, p.phi));
        }
        rows.push(json!({
            "start": s,
            "status": tr.status.as_str(),
            "bounces": tr.bounces,
            "a_end": tr.last().a,
            "phi_end": tr.last().phi,
        }));
        out.csv(format!("mini_traj_{i:03}.csv"), |w| tr.write_csv(w));
    }
    out.check("wd_residual", worst < 1e-10, format!("max relative residual {worst:e}"));
    out.summary = json!({ "trajectories": rows });
    Ok(())
}

fn taubh(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.taubh, Experiment::Taubh)?;
    if t.m_over_mp.is_empty() {
        return Err(config_err("taubh needs at least one mass"));
    }
    let rows = t
        .m_over_mp
        .iter()
        .map(|&m| BlackHoleParams::new(m, t.kappa))
        .collect::<pilotwave_core::Result<Vec<_>>>()
        .map_err(op("mini::BlackHoleParams"))?;
    out.csv("tau_bh.csv", |w| mini::write_tau_csv(&rows, w));
    let taus: Vec<f64> = rows.iter().map(mini::tau_black_hole).collect();
    out.check("tau_positive", taus.iter().all(|v| *v > 0.0 && v.is_finite()), format!("{} rows", taus.len()));
    out.summary = json!({ "tau_over_tP": taus });
    Ok(())
}

fn branch(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.branch, Experiment::Branch)?;
    let ens = t.ensemble.unwrap_or(SystemEnsemble::Equilibrium);
    let r = experiments::run_branching(&t.setup, ens, t.runs, cfg.common.seed, &cfg.common.integrator)
        .map_err(op("experiments::run_branching"))?;
    out.csv("branching.csv", |w| r.write_csv(w));
    let total: u64 = r.counts.iter().sum();
    out.check("every_run_in_one_branch", total == t.runs, format!("{total} of {} runs assigned", t.runs));
    out.summary = json!({
        "counts": r.counts,
        "frequencies": r.frequencies,
        "errors": r.errors,
        "born": r.born,
        "chi_square": r.chi_square,
    });
    Ok(())
}

fn momentum(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.momentum, Experiment::Momentum)?;
    let ens = t.ensemble.unwrap_or(MomentumEnsemble::Equilibrium);
    let r = experiments::momentum_demo(&t.setup, ens, t.runs, cfg.common.seed, &cfg.common.integrator)
        .map_err(op("experiments::momentum_demo"))?;
    out.csv("momentum.csv", |w| r.write_csv(w));
    out.check("initial_velocity_zero", r.max_initial_speed == 0.0, format!("max |v0| = {:e}", r.max_initial_speed));
    out.summary = json!({ "plus": r.plus, "minus": r.minus, "plus_fraction": r.plus_fraction(), "z": r.z });
    Ok(())
}

fn subq(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.subq, Experiment::Subq)?;
    let psi: OscWave1d = t.wave().map_err(op("experiments::OscWave1d"))?;
    let r = experiments::subquantum_measure(&psi, &t.coupling, t.runs, cfg.common.seed)
        .map_err(op("experiments::subquantum_measure"))?;
    out.csv("subq.csv", |w| r.write_csv(w));
    let failures = r.runs.iter().filter(|x| !x.ok).count();
    out.check("estimate_within_bound", r.all_ok, format!("{failures} of {} runs outside w/(2gt)", r.runs.len()));
    let mut summary = json!({
        "bound": t.coupling.error_bound(),
        "rms_error": r.rms_error,
        "joint_disturbance": r.joint_disturbance,
        "conditional_disturbance": r.conditional_disturbance,
    });
    if let Some(track) = &t.track {
        let tr = experiments::track_trajectory(&psi, track.x0, &track.times, &t.coupling, cfg.common.seed, &cfg.common.integrator)
            .map_err(op("experiments::track_trajectory"))?;
        out.csv("track.csv", |w| tr.write_csv(w));
        let worst = tr.steps.iter().map(|s| (s.x_hat - s.x_actual).abs()).fold(0.0, f64::max);
        out.check("track_within_bound", tr.within_bounds, format!("max |x_hat - x| = {worst:e}"));
        summary["track"] = json!({
            "single_step_disturbance": tr.single_step_disturbance,
            "cumulative_disturbance": tr.cumulative_disturbance,
            "max_deviation": tr.max_deviation,
            "max_drift": tr.max_drift,
        });
    }
    out.summary = summary;
    Ok(())
}

fn epr(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.epr, Experiment::Epr)?;
    let ic = &cfg.common.integrator;
    let r = experiments::run_epr(&t.config, t.pairs, cfg.common.seed, ic).map_err(op("experiments::run_epr"))?;
    out.csv("epr.csv", |w| r.write_csv(w));
    // paired design: the same positions under the same settings must give the same outcomes
    let n = t.pairs.min(100);
    let again = experiments::run_epr(&t.config, n, cfg.common.seed, ic).map_err(op("experiments::run_epr"))?;
    let same = again.pairs.iter().zip(&r.pairs).all(|(a, b)| a == b);
    out.check("paired_runs_deterministic", same, format!("first {n} pairs re-run"));
    out.summary = json!({
        "nu_plus_minus": r.nu_plus_minus,
        "nu_minus_plus": r.nu_minus_plus,
        "balance_z": r.balance_z,
        "marginal_b": r.marginal_b,
        "marginal_b_prime": r.marginal_b_prime,
        "signal_z": r.signal_z,
    });
    Ok(())
}

fn discriminate(cfg: &Config, out: &mut Output) -> Result<(), Failure> {
    let t = table(&cfg.discriminate, Experiment::Discriminate)?;
    let mut setup = match t.overlap {
        Some(o) => DiscriminationSetup::two_mode(o, t.coupling).map_err(op("experiments::DiscriminationSetup"))?,
        None => {
            if t.psi1.is_empty() || t.psi2.is_empty() {
                return Err(config_err("discriminate needs `overlap` or both `psi1` and `psi2`"));
            }
            DiscriminationSetup {
                psi1: OscWave1d::new(t.psi1.clone()).map_err(op("experiments::OscWave1d"))?,
                psi2: OscWave1d::new(t.psi2.clone()).map_err(op("experiments::OscWave1d"))?,
                coupling: t.coupling,
                horizon: 0.0,
                samples: 0,
                runs: 0,
            }
        }
    };
    setup.horizon = t.horizon;
    setup.samples = t.samples;
    setup.runs = t.runs;
    let r = experiments::discriminate_states(&setup, cfg.common.seed, &cfg.common.integrator)
        .map_err(op("experiments::discriminate_states"))?;
    r.check().map_err(op("experiments::discriminate_states"))?;
    out.csv("discrimination.csv", |w| {
        writeln!(w, "overlap,accuracy,accuracy_first,accuracy_second,inconclusive_fraction")?;
        writeln!(
            w,
            "{},{},{},{},{}",
            fmt(r.overlap),
            fmt(r.accuracy),
            fmt(r.accuracy_first),
            fmt(r.accuracy_second),
            fmt(r.inconclusive_fraction)
        )
    });
    let in_range = (0.0..=1.0).contains(&r.accuracy);
    out.check("accuracy_in_unit_interval", in_range, format!("{}", r.accuracy));
    out.summary = json!({ "accuracy": r.accuracy, "overlap": r.overlap, "bound": t.coupling.error_bound() });
    Ok(())
}

fn fmt(x: f64) -> String {
    pilotwave_core::io::fmt_f64(x)
}
