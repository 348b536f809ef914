//! Measurement experiments: pointer branching, the momentum measurement,
//! subquantum position measurement and tracking, EPR pairs with impulsive spin
//! couplings, and discrimination of non-orthogonal states by their trajectories.
//!
//! Couplings are impulsive: while a pointer is coupled the free Hamiltonian is
//! switched off, so every wave below is known in closed form.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Write};

use crate::error::{invalid, Error, Result};
use crate::guidance::{endpoint, near_node, IntegratorConfig, Velocity};
use crate::io::fmt_f64;
use crate::ode::{self, Flow, NodeHit};
use crate::psi::C64;
use crate::rng::stream;
use crate::special::{gauss_hermite, hermite_functions};
use crate::stats::{self, ChiSquare};

/// Initial distribution of pointer positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointerEnsemble {
    /// `|g0|^2`.
    Equilibrium,
    /// Uniform on `[-w/2, w/2]`.
    TopHat { w: f64 },
}

/// Pointer coupled through `H_I = g omega p_y` for `duration`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointerCoupling {
    pub g: f64,
    pub duration: f64,
    /// Standard deviation of `|g0|^2`.
    pub width: f64,
    pub ensemble: PointerEnsemble,
}

impl PointerCoupling {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if !(ok(self.g) && ok(self.duration) && ok(self.width) && ok(self.g * self.duration)) {
            return Err(invalid("pointer coupling needs positive finite g, duration and width"));
        }
        if let PointerEnsemble::TopHat { w } = self.ensemble {
            if !ok(w) {
                return Err(invalid("top-hat width must be positive"));
            }
        }
        Ok(())
    }

    pub fn strength(&self) -> f64 {
        self.g * self.duration
    }

    /// Real Gaussian packet `g0(y)`, normalized.
    pub fn packet(&self, y: f64) -> f64 {
        let d = self.width;
        (2.0 * PI * d * d).powf(-0.25) * (-y * y / (4.0 * d * d)).exp()
    }

    pub fn sample_y0<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.ensemble {
            PointerEnsemble::Equilibrium => Normal::new(0.0, self.width).expect("positive width").sample(rng),
            PointerEnsemble::TopHat { w } => rng.gen_range(-0.5 * w..=0.5 * w),
        }
    }

    /// Guaranteed estimate error `w / (2 g t)` for a top-hat ensemble; infinite otherwise.
    pub fn error_bound(&self) -> f64 {
        match self.ensemble {
            PointerEnsemble::TopHat { w } => w / (2.0 * self.strength()),
            PointerEnsemble::Equilibrium => f64::INFINITY,
        }
    }
}

/// Largest value of `f` on a 4096-point scan of `[lo, hi]`, padded by 25%.
fn density_bound(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = 4096;
    (0..=n).map(|i| f(lo + (hi - lo) * i as f64 / n as f64)).fold(0.0, f64::max) * 1.25
}

fn rejection<R: Rng>(rng: &mut R, lo: f64, hi: f64, max: f64, f: impl Fn(f64) -> f64) -> f64 {
    loop {
        let x = rng.gen_range(lo..hi);
        if rng.gen::<f64>() * max < f(x) {
            return x;
        }
    }
}

fn aborted(status: ode::Status) -> Error {
    Error::TrajectoryAborted(status.as_str().to_string())
}

// ---------------------------------------------------------------- branching

/// System in a row of wells, one eigenfunction (well ground state) per
/// eigenvalue of the measured observable, coupled to a pointer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchingSetup {
    /// `c_n`, one per well; normalized on use.
    pub amplitudes: Vec<C64>,
    /// Eigenvalue `omega_n` of each well.
    pub eigenvalues: Vec<f64>,
    pub well_width: f64,
    pub well_gap: f64,
    pub coupling: PointerCoupling,
}

impl BranchingSetup {
    /// Two wells with `c = (3/5, 4/5)` and eigenvalues `0, 1`.
    pub fn two_level(coupling: PointerCoupling) -> Self {
        Self {
            amplitudes: vec![C64::new(0.6, 0.0), C64::new(0.8, 0.0)],
            eigenvalues: vec![0.0, 1.0],
            well_width: 1.0,
            well_gap: 0.5,
            coupling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coupling.validate()?;
        if self.amplitudes.is_empty() || self.amplitudes.len() != self.eigenvalues.len() {
            return Err(invalid("need one amplitude per eigenvalue"));
        }
        if !(self.well_width > 0.0 && self.well_gap >= 0.0) {
            return Err(invalid("wells need positive width and non-negative gap"));
        }
        if !(self.amplitudes.iter().map(|c| c.norm_sqr()).sum::<f64>() > 0.0) {
            return Err(invalid("amplitudes are all zero"));
        }
        Ok(())
    }

    /// Born weights `|c_n|^2`, normalized.
    pub fn born(&self) -> Vec<f64> {
        let z: f64 = self.amplitudes.iter().map(|c| c.norm_sqr()).sum();
        self.amplitudes.iter().map(|c| c.norm_sqr() / z).collect()
    }

    fn well_start(&self, n: usize) -> f64 {
        n as f64 * (self.well_width + self.well_gap)
    }

    fn well_of(&self, x: f64) -> Option<usize> {
        let pitch = self.well_width + self.well_gap;
        let n = (x / pitch).floor();
        if n < 0.0 || n as usize >= self.amplitudes.len() {
            return None;
        }
        let n = n as usize;
        (x - self.well_start(n) < self.well_width).then_some(n)
    }

    /// Ground state of well `n` and its derivative.
    fn eigenfunction(&self, n: usize, x: f64) -> (f64, f64) {
        let l = self.well_width;
        let s = x - self.well_start(n);
        if !(0.0..l).contains(&s) {
            return (0.0, 0.0);
        }
        let k = PI / l;
        let norm = (2.0 / l).sqrt();
        (norm * (k * s).sin(), norm * k * (k * s).cos())
    }

    fn system_density(&self, x: f64, weights: &[f64]) -> f64 {
        self.well_of(x).map_or(0.0, |n| weights[n] * self.eigenfunction(n, x).0.powi(2))
    }

    fn x_range(&self) -> (f64, f64) {
        (0.0, self.well_start(self.amplitudes.len() - 1) + self.well_width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Branch {
    pub eigenvalue: f64,
    pub weight: C64,
    /// Pointer centre `g omega_n t`.
    pub center: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BranchingState {
    pub branches: Vec<Branch>,
    pub min_separation: f64,
    /// Minimum centre separation exceeds six pointer widths.
    pub separation_ok: bool,
}

impl BranchingState {
    /// Branch whose centre is nearest to `y`: every pointer position belongs to exactly one.
    pub fn assign(&self, y: f64) -> usize {
        let mut best = 0;
        for (i, b) in self.branches.iter().enumerate() {
            if (y - b.center).abs() < (y - self.branches[best].center).abs() {
                best = i;
            }
        }
        best
    }
}

pub fn branching_state(setup: &BranchingSetup, t: f64) -> BranchingState {
    let g = setup.coupling.g;
    let branches: Vec<Branch> = setup
        .amplitudes
        .iter()
        .zip(&setup.eigenvalues)
        .map(|(&c, &w)| Branch { eigenvalue: w, weight: c, center: g * w * t })
        .collect();
    let mut min_separation = f64::INFINITY;
    for (i, a) in branches.iter().enumerate() {
        for b in &branches[i + 1..] {
            min_separation = min_separation.min((a.center - b.center).abs());
        }
    }
    let separation_ok = min_separation > 6.0 * setup.coupling.width;
    BranchingState { branches, min_separation, separation_ok }
}

/// Guidance flow of `Psi = sum_n c_n phi_n(x) g0(y - g omega_n t)` on `(x, y)`.
pub struct BranchingFlow<'a> {
    setup: &'a BranchingSetup,
    c: Vec<C64>,
}

impl<'a> BranchingFlow<'a> {
    pub fn new(setup: &'a BranchingSetup) -> Self {
        let z = setup.amplitudes.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        Self { setup, c: setup.amplitudes.iter().map(|c| c / z).collect() }
    }

    pub fn psi(&self, q: [f64; 2], t: f64) -> (C64, [C64; 2]) {
        let zero = C64::new(0.0, 0.0);
        let Some(n) = self.setup.well_of(q[0]) else { return (zero, [zero, zero]) };
        let cp = &self.setup.coupling;
        let (f, df) = self.setup.eigenfunction(n, q[0]);
        let y = q[1] - cp.g * self.setup.eigenvalues[n] * t;
        let p = cp.packet(y);
        let dp = -y / (2.0 * cp.width * cp.width) * p;
        let c = self.c[n];
        (c * f * p, [c * df * p, c * f * dp])
    }
}

impl Velocity for BranchingFlow<'_> {
    fn velocity(&self, q: [f64; 2], t: f64, node_floor: f64) -> Result<[f64; 2]> {
        let (psi, grad) = self.psi(q, t);
        if near_node(psi, &grad, node_floor) {
            return Err(Error::NodeProximity { density: psi.norm_sqr() });
        }
        // omega is diagonal in x, so g psi* omega psi / |psi|^2 is g omega(x); x does not move
        let n = self.setup.well_of(q[0]).expect("nonzero psi lies in a well");
        Ok([0.0, self.setup.coupling.g * self.setup.eigenvalues[n]])
    }
}

/// Initial distribution of the measured system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemEnsemble {
    /// `|psi0|^2`.
    Equilibrium,
    /// `|phi_n|^2` of a single eigenfunction.
    Eigenfunction { n: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BranchRun {
    pub run: u64,
    pub branch: usize,
    pub q_end: [f64; 2],
}

#[derive(Clone, Debug, Serialize)]
pub struct BranchingResult {
    pub runs: Vec<BranchRun>,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    /// Binomial standard errors of the frequencies.
    pub errors: Vec<f64>,
    pub born: Vec<f64>,
    /// Goodness of fit to the Born weights; absent when some weight is zero.
    pub chi_square: Option<ChiSquare>,
}

impl BranchingResult {
    /// Columns `run_id,branch,q_end,y_end`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "run_id,branch,q_end,y_end")?;
        for r in &self.runs {
            writeln!(out, "{},{},{},{}", r.run, r.branch, fmt_f64(r.q_end[0]), fmt_f64(r.q_end[1]))?;
        }
        Ok(())
    }
}

/// Runs the pointer measurement `n_runs` times and tallies the branch of each endpoint.
pub fn run_branching(
    setup: &BranchingSetup,
    ensemble: SystemEnsemble,
    n_runs: u64,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<BranchingResult> {
    setup.validate()?;
    let t_end = setup.coupling.duration;
    let state = branching_state(setup, t_end);
    if !state.separation_ok {
        return Err(Error::BranchOverlap { separation: state.min_separation, required: 6.0 * setup.coupling.width });
    }
    let born = setup.born();
    let weights = match ensemble {
        SystemEnsemble::Equilibrium => born.clone(),
        SystemEnsemble::Eigenfunction { n } => {
            if n >= born.len() {
                return Err(invalid("eigenfunction index out of range"));
            }
            (0..born.len()).map(|i| if i == n { 1.0 } else { 0.0 }).collect()
        }
    };
    let (lo, hi) = setup.x_range();
    let max = density_bound(lo, hi, |x| setup.system_density(x, &weights));
    let flow = BranchingFlow::new(setup);
    let runs: Vec<BranchRun> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream(seed, run);
            let x0 = rejection(&mut rng, lo, hi, max, |x| setup.system_density(x, &weights));
            let y0 = setup.coupling.sample_y0(&mut rng);
            let (q, status) = endpoint(&flow, [x0, y0], 0.0, t_end, cfg);
            if !status.is_completed() {
                return Err(aborted(status));
            }
            Ok(BranchRun { run, branch: state.assign(q[1]), q_end: q })
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; born.len()];
    for r in &runs {
        counts[r.branch] += 1;
    }
    let n = n_runs as f64;
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let errors = frequencies.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
    let chi_square = if born.len() >= 2 && born.iter().all(|&p| p > 0.0) { Some(stats::chi_square(&counts, &born)?) } else { None };
    Ok(BranchingResult { runs, counts, frequencies, errors, born, chi_square })
}

// ----------------------------------------------------------------- momentum

/// Measurement of `p_x` on `psi0 = exp(-x^2 / 4 sigma^2) cos(p x)` through `H_I = g p_x p_y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumSetup {
    pub p: f64,
    /// Envelope width `sigma` (`|psi0|^2` envelope has standard deviation `sigma`).
    pub envelope: f64,
    pub coupling: PointerCoupling,
}

impl MomentumSetup {
    pub fn validate(&self) -> Result<()> {
        self.coupling.validate()?;
        if !(self.p > 0.0 && self.envelope > 0.0) {
            return Err(invalid("momentum demo needs positive p and envelope width"));
        }
        Ok(())
    }

    /// Real initial wave and its derivative.
    pub fn psi0(&self, x: f64) -> (f64, f64) {
        let s2 = self.envelope * self.envelope;
        let env = (-x * x / (4.0 * s2)).exp();
        let (sin, cos) = (self.p * x).sin_cos();
        (env * cos, env * (-x / (2.0 * s2) * cos - self.p * sin))
    }

    /// `Psi(x, y, t)` and its gradient: the k-integral over the two Gaussian
    /// momentum peaks times the shifted pointer packet, done in closed form.
    pub fn psi(&self, x: f64, y: f64, t: f64) -> (C64, [C64; 2]) {
        let s2 = self.envelope * self.envelope;
        let d2 = self.coupling.width * self.coupling.width;
        let tau = self.coupling.g * t;
        let alpha = s2 + tau * tau / (4.0 * d2);
        let pre = (PI / alpha).sqrt();
        let i = C64::new(0.0, 1.0);
        let zero = C64::new(0.0, 0.0);
        let (mut psi, mut gx, mut gy) = (zero, zero, zero);
        for kc in [self.p, -self.p] {
            let beta = C64::new(2.0 * s2 * kc + y * tau / (2.0 * d2), x);
            let gamma = -s2 * kc * kc - y * y / (4.0 * d2);
            let term = pre * (beta * beta / (4.0 * alpha) + gamma).exp();
            psi += term;
            gx += term * i * beta / (2.0 * alpha);
            gy += term * (beta * tau / (4.0 * d2 * alpha) - y / (2.0 * d2));
        }
        (psi, [gx, gy])
    }

    /// Width of each pointer branch at the end of the coupling.
    pub fn branch_width(&self) -> f64 {
        let spread = self.coupling.strength() / (2.0 * self.envelope);
        (self.coupling.width.powi(2) + spread * spread).sqrt()
    }
}

/// `x_dot = g d_y S`, `y_dot = g d_x S`.
pub struct MomentumFlow<'a>(pub &'a MomentumSetup);

impl Velocity for MomentumFlow<'_> {
    fn velocity(&self, q: [f64; 2], t: f64, node_floor: f64) -> Result<[f64; 2]> {
        let (psi, grad) = self.0.psi(q[0], q[1], t);
        if near_node(psi, &grad, node_floor) {
            return Err(Error::NodeProximity { density: psi.norm_sqr() });
        }
        let g = self.0.coupling.g;
        Ok([g * (grad[1] / psi).im, g * (grad[0] / psi).im])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentumEnsemble {
    /// `|psi0|^2 |g0|^2`.
    Equilibrium,
    /// System density `|psi0|^2 (1 + skew tanh(x / sigma))`, `|skew| < 1`.
    /// Leaves the outcomes unchanged: the line `y = 0` is invariant under the
    /// flow, so every outcome is the sign of `y0`.
    Skewed { skew: f64 },
    /// Pointer density `|g0|^2 (1 + skew tanh(y / width))`, `|skew| < 1`.
    PointerSkewed { skew: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MomentumRun {
    pub run: u64,
    pub q0: [f64; 2],
    pub q_end: [f64; 2],
    /// `+1` for the `+p` branch, `-1` for `-p`.
    pub outcome: i8,
    /// `d_x S_0 / m` at the initial position, before the coupling starts.
    pub v0: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentumResult {
    pub runs: Vec<MomentumRun>,
    pub plus: u64,
    pub minus: u64,
    /// Score of the `+p` count against one half.
    pub z: f64,
    pub max_initial_speed: f64,
}

impl MomentumResult {
    pub fn plus_fraction(&self) -> f64 {
        self.plus as f64 / (self.plus + self.minus) as f64
    }

    /// Columns `run_id,x0,y0,x_end,y_end,outcome,v0`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "run_id,x0,y0,x_end,y_end,outcome,v0")?;
        for r in &self.runs {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.run,
                fmt_f64(r.q0[0]),
                fmt_f64(r.q0[1]),
                fmt_f64(r.q_end[0]),
                fmt_f64(r.q_end[1]),
                r.outcome,
                fmt_f64(r.v0)
            )?;
        }
        Ok(())
    }
}

pub fn momentum_demo(
    setup: &MomentumSetup,
    ensemble: MomentumEnsemble,
    n_runs: u64,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<MomentumResult> {
    setup.validate()?;
    let t_end = setup.coupling.duration;
    let separation = 2.0 * setup.p * setup.coupling.strength();
    let required = 6.0 * setup.branch_width();
    if !(separation > required) {
        return Err(Error::BranchOverlap { separation, required });
    }
    let (skew, pointer_skew) = match ensemble {
        MomentumEnsemble::Equilibrium => (0.0, 0.0),
        MomentumEnsemble::Skewed { skew } => (skew, 0.0),
        MomentumEnsemble::PointerSkewed { skew } => (0.0, skew),
    };
    if !(skew.abs() < 1.0 && pointer_skew.abs() < 1.0) {
        return Err(invalid("skew must lie in (-1, 1)"));
    }
    let sigma = setup.envelope;
    let density = |x: f64| setup.psi0(x).0.powi(2) * (1.0 + skew * (x / sigma).tanh());
    let half = 8.0 * sigma;
    let max = 1.0 + skew.abs();
    let width = setup.coupling.width;
    let pointer = |y: f64| setup.coupling.packet(y).powi(2) * (1.0 + pointer_skew * (y / width).tanh());
    let pointer_max = density_bound(-8.0 * width, 8.0 * width, pointer);
    let flow = MomentumFlow(setup);
    let runs: Vec<MomentumRun> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream(seed, run);
            let x0 = rejection(&mut rng, -half, half, max, density);
            let y0 = if pointer_skew == 0.0 {
                setup.coupling.sample_y0(&mut rng)
            } else {
                rejection(&mut rng, -8.0 * width, 8.0 * width, pointer_max, pointer)
            };
            // psi0 is real, so its phase gradient vanishes identically
            let (f, df) = setup.psi0(x0);
            let v0 = (C64::new(df, 0.0) / C64::new(f, 0.0)).im;
            let (q, status) = endpoint(&flow, [x0, y0], 0.0, t_end, cfg);
            if !status.is_completed() {
                return Err(aborted(status));
            }
            Ok(MomentumRun { run, q0: [x0, y0], q_end: q, outcome: if q[1] > 0.0 { 1 } else { -1 }, v0 })
        })
        .collect::<Result<_>>()?;
    let plus = runs.iter().filter(|r| r.outcome > 0).count() as u64;
    let minus = n_runs - plus;
    let n = n_runs as f64;
    let z = (plus as f64 - 0.5 * n) / (0.25 * n).sqrt();
    let max_initial_speed = runs.iter().map(|r| r.v0.abs()).fold(0.0, f64::max);
    Ok(MomentumResult { runs, plus, minus, z, max_initial_speed })
}

// ------------------------------------------------------- one-dimensional waves

/// A one-dimensional wave with its spatial derivative.
pub trait Wave1d: Sync {
    fn eval(&self, x: f64, t: f64) -> (C64, C64);
}

/// Superposition of unit-mass, unit-frequency oscillator eigenfunctions;
/// `coeffs[n]` is the amplitude at `t = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscWave1d {
    pub coeffs: Vec<C64>,
}

impl OscWave1d {
    pub fn new(coeffs: Vec<C64>) -> Result<Self> {
        let z = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if coeffs.is_empty() || !(z > 0.0 && z.is_finite()) {
            return Err(invalid("1D wave needs a nonzero finite coefficient vector"));
        }
        Ok(Self { coeffs: coeffs.into_iter().map(|c| c / z).collect() })
    }

    pub fn overlap(&self, other: &Self) -> C64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a.conj() * b).sum()
    }

    /// L2 distance (time independent: both evolve by the same unitary).
    pub fn distance(&self, other: &Self) -> f64 {
        let n = self.coeffs.len().max(other.coeffs.len());
        let zero = C64::new(0.0, 0.0);
        (0..n)
            .map(|i| {
                let a = self.coeffs.get(i).copied().unwrap_or(zero);
                let b = other.coeffs.get(i).copied().unwrap_or(zero);
                (a - b).norm_sqr()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Half-width of an interval holding all but a negligible part of the density.
    pub fn extent(&self) -> f64 {
        (2.0 * self.coeffs.len() as f64 + 1.0).sqrt() + 7.0
    }

    fn phase(n: usize, t: f64) -> C64 {
        C64::from_polar(1.0, -(n as f64 + 0.5) * t)
    }

    /// Multiplies `psi(x, t)` by `factor(x)`, renormalizes, and re-expands in
    /// `basis` eigenfunctions by Gauss–Hermite projection.
    pub fn kicked(&self, t: f64, factor: impl Fn(f64) -> f64, basis: usize, rule: &(Vec<f64>, Vec<f64>)) -> Result<Self> {
        let (nodes, weights) = rule;
        let mut out = vec![C64::new(0.0, 0.0); basis];
        let mut v = vec![0.0; basis];
        let mut d = vec![0.0; basis];
        for (&x, &w) in nodes.iter().zip(weights) {
            let f = self.eval(x, t).0 * factor(x) * w * (x * x).exp();
            hermite_functions(x, &mut v, &mut d);
            for n in 0..basis {
                out[n] += v[n] * f;
            }
        }
        // back to amplitudes at t = 0
        for (n, c) in out.iter_mut().enumerate() {
            *c *= Self::phase(n, t).conj();
        }
        Self::new(out)
    }
}

impl Wave1d for OscWave1d {
    fn eval(&self, x: f64, t: f64) -> (C64, C64) {
        const STACK: usize = 64;
        let n = self.coeffs.len();
        let (mut sv, mut sd) = ([0.0; STACK], [0.0; STACK]);
        let (mut hv, mut hd) = (Vec::new(), Vec::new());
        let (v, d) = if n <= STACK {
            (&mut sv[..n], &mut sd[..n])
        } else {
            hv.resize(n, 0.0);
            hd.resize(n, 0.0);
            (&mut hv[..], &mut hd[..])
        };
        hermite_functions(x, v, d);
        let zero = C64::new(0.0, 0.0);
        let (mut psi, mut dpsi) = (zero, zero);
        for (k, c) in self.coeffs.iter().enumerate() {
            let a = c * Self::phase(k, t);
            psi += a * v[k];
            dpsi += a * d[k];
        }
        (psi, dpsi)
    }
}

/// `Im(psi' / psi)` (unit mass).
pub fn velocity_1d<W: Wave1d + ?Sized>(wave: &W, x: f64, t: f64, node_floor: f64) -> Result<f64> {
    let (psi, d) = wave.eval(x, t);
    if near_node(psi, &[d, C64::new(0.0, 0.0)], node_floor) {
        return Err(Error::NodeProximity { density: psi.norm_sqr() });
    }
    Ok((d / psi).im)
}

/// Carries `x` from `t0` to `t1` along the guidance flow of `wave`.
pub fn advance_1d<W: Wave1d + ?Sized>(wave: &W, x: f64, t0: f64, t1: f64, cfg: &IntegratorConfig) -> Result<f64> {
    if t0 == t1 {
        return velocity_1d(wave, x, t0, cfg.node_floor).map(|_| x);
    }
    let floor = cfg.node_floor;
    let rhs = |t: f64, y: &[f64; 1]| velocity_1d(wave, y[0], t, floor).map(|v| [v]).map_err(|_| NodeHit);
    let out = ode::solve(rhs, [x], t0, t1, &cfg.step_control(), |_| Flow::Continue);
    if !out.status.is_completed() {
        return Err(aborted(out.status));
    }
    Ok(out.y[0])
}

fn sample_1d<W: Wave1d + ?Sized, R: Rng>(wave: &W, half: f64, max: f64, rng: &mut R) -> f64 {
    rejection(rng, -half, half, max, |x| wave.eval(x, 0.0).0.norm_sqr())
}

// ------------------------------------------------------------- subquantum

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SubqRun {
    pub run: u64,
    pub x0: f64,
    pub y_read: f64,
    pub x_hat: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SubqResult {
    pub runs: Vec<SubqRun>,
    pub all_ok: bool,
    pub rms_error: f64,
    /// `|| psi0(x) g0(y - g x t) - psi0(x) g0(y) ||` over `(x, y)`.
    pub joint_disturbance: f64,
    /// Mean over runs of `|| psi_c / |psi_c| - psi0 ||` for the conditional wave
    /// `psi_c(x) = psi0(x) g0(y_read - g x t)`.
    pub conditional_disturbance: f64,
}

impl SubqResult {
    /// Columns `run_id,x0,y_read,x_hat,bound,ok`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "run_id,x0,y_read,x_hat,bound,ok")?;
        for r in &self.runs {
            writeln!(out, "{},{},{},{},{},{}", r.run, fmt_f64(r.x0), fmt_f64(r.y_read), fmt_f64(r.x_hat), fmt_f64(r.bound), r.ok as u8)?;
        }
        Ok(())
    }
}

const QUAD_POINTS: usize = 4001;

/// Position measurement through `H_I = g x p_y`: `x_dot = 0`, `y_dot = g x`, so
/// `y(t) = y0 + g x0 t` and `x_hat = y / (g t)` is off by `y0 / (g t)`.
pub fn subquantum_measure(psi0: &OscWave1d, coupling: &PointerCoupling, n_runs: u64, seed: u64) -> Result<SubqResult> {
    coupling.validate()?;
    let gt = coupling.strength();
    let bound = coupling.error_bound();
    let half = psi0.extent();
    let max = density_bound(-half, half, |x| psi0.eval(x, 0.0).0.norm_sqr());
    let dx = 2.0 * half / (QUAD_POINTS - 1) as f64;
    let grid: Vec<(f64, f64)> = (0..QUAD_POINTS)
        .map(|i| {
            let x = -half + i as f64 * dx;
            (x, psi0.eval(x, 0.0).0.norm_sqr() * dx)
        })
        .collect();
    let d2 = coupling.width * coupling.width;
    let runs: Vec<(SubqRun, f64)> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = stream(seed, run);
            let x0 = sample_1d(psi0, half, max, &mut rng);
            let y0 = coupling.sample_y0(&mut rng);
            let y_read = y0 + gt * x0;
            let x_hat = y_read / gt;
            let err = (x_hat - x0).abs();
            // exact up to the rounding of the two divisions above
            let ok = err <= bound + 4.0 * f64::EPSILON * (x_hat.abs() + x0.abs());
            // conditional wave relative to psi0: factor exp(-(y - g x t)^2 / 4 d2) / exp(-y^2 / 4 d2)
            let log_f = |x: f64| (2.0 * y_read * gt * x - gt * gt * x * x) / (4.0 * d2);
            let norm: f64 = grid.iter().map(|&(x, w)| w * (2.0 * log_f(x)).exp()).sum::<f64>().sqrt();
            let dist: f64 = grid
                .iter()
                .map(|&(x, w)| {
                    let r = (log_f(x) - norm.ln()).exp_m1();
                    w * r * r
                })
                .sum::<f64>()
                .sqrt();
            (SubqRun { run, x0, y_read, x_hat, bound, ok }, dist)
        })
        .collect();
    let joint: f64 = grid.iter().map(|&(x, w)| -2.0 * w * (-(gt * x).powi(2) / (8.0 * d2)).exp_m1()).sum::<f64>().sqrt();
    let n = n_runs.max(1) as f64;
    let all_ok = runs.iter().all(|r| r.0.ok);
    let rms_error = (runs.iter().map(|r| (r.0.x_hat - r.0.x0).powi(2)).sum::<f64>() / n).sqrt();
    let conditional_disturbance = runs.iter().map(|r| r.1).sum::<f64>() / n;
    Ok(SubqResult { runs: runs.into_iter().map(|r| r.0).collect(), all_ok, rms_error, joint_disturbance: joint, conditional_disturbance })
}

/// Disturbance as a function of `g t`: returns `(g t, joint disturbance)` pairs and
/// the log-log slope of the relation.
pub fn disturbance_scaling(psi0: &OscWave1d, coupling: &PointerCoupling, strengths: &[f64]) -> Result<(Vec<(f64, f64)>, f64)> {
    let mut pts = Vec::with_capacity(strengths.len());
    for &s in strengths {
        let c = PointerCoupling { duration: s / coupling.g, ..*coupling };
        pts.push((s, subquantum_measure(psi0, &c, 0, 0)?.joint_disturbance));
    }
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    Ok((pts, stats::line_fit(&lx, &ly)?.slope))
}

// ---------------------------------------------------------------- tracking

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrackStep {
    pub t: f64,
    pub x_hat: f64,
    pub x_actual: f64,
    pub x_reference: f64,
    pub bound: f64,
    /// Distance between the wave just after this coupling and just before it.
    pub disturbance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrackResult {
    pub steps: Vec<TrackStep>,
    /// Mean over couplings of the distance between the wave just after and just before it.
    pub single_step_disturbance: f64,
    /// Distance between the repeatedly measured wave and the undisturbed one at the end.
    pub cumulative_disturbance: f64,
    /// `max |x_hat - x_reference|`.
    pub max_deviation: f64,
    /// Every estimate lies within its bound of the actual (measured) trajectory.
    pub within_bounds: bool,
    /// `max |x_actual - x_reference|`: drift caused by the measurements.
    pub max_drift: f64,
}

impl TrackResult {
    /// Columns `t,x_hat,x_actual,x_reference,bound,disturbance`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "t,x_hat,x_actual,x_reference,bound,disturbance")?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt_f64(s.t),
                fmt_f64(s.x_hat),
                fmt_f64(s.x_actual),
                fmt_f64(s.x_reference),
                fmt_f64(s.bound),
                fmt_f64(s.disturbance)
            )?;
        }
        Ok(())
    }
}

/// Extra basis functions kept when re-expanding a measured wave.
const KICK_PAD: usize = 16;

/// Repeated subquantum measurements of one trajectory at `times`. Each coupling
/// is impulsive; in between, the particle moves with the conditional wave left
/// by the previous readings. The undisturbed trajectory from the same start is
/// the reference.
pub fn track_trajectory(
    psi: &OscWave1d,
    x0: f64,
    times: &[f64],
    coupling: &PointerCoupling,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<TrackResult> {
    coupling.validate()?;
    if times.is_empty() || times[0] < 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("tracking times must be non-negative and increasing"));
    }
    let basis = (psi.coeffs.len() + KICK_PAD).min(96);
    let rule = gauss_hermite(2 * basis);
    let gt = coupling.strength();
    let d2 = coupling.width * coupling.width;
    let bound = coupling.error_bound();
    let mut rng = stream(seed, 0);
    let mut wave = psi.clone();
    let (mut x, mut x_ref, mut t) = (x0, x0, 0.0);
    let mut steps = Vec::with_capacity(times.len());
    for &ti in times {
        x = advance_1d(&wave, x, t, ti, cfg)?;
        x_ref = advance_1d(psi, x_ref, t, ti, cfg)?;
        t = ti;
        let y = coupling.sample_y0(&mut rng) + gt * x;
        let before = wave.clone();
        wave = wave.kicked(t, |s| (-(y - gt * s).powi(2) / (4.0 * d2)).exp(), basis, &rule)?;
        let disturbance = wave.distance(&before);
        steps.push(TrackStep { t, x_hat: y / gt, x_actual: x, x_reference: x_ref, bound, disturbance });
    }
    let max_deviation = steps.iter().map(|s| (s.x_hat - s.x_reference).abs()).fold(0.0, f64::max);
    let single = steps.iter().map(|s| s.disturbance).sum::<f64>() / steps.len() as f64;
    Ok(TrackResult {
        within_bounds: steps.iter().all(|s| (s.x_hat - s.x_actual).abs() <= s.bound * (1.0 + 1e-9)),
        max_drift: steps.iter().map(|s| (s.x_actual - s.x_reference).abs()).fold(0.0, f64::max),
        steps,
        single_step_disturbance: single,
        cumulative_disturbance: wave.distance(psi),
        max_deviation,
    })
}

// --------------------------------------------------------------------- EPR

/// Impulsive coupling of `m . sigma` to a particle's own coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WingCoupling {
    pub g: f64,
    pub duration: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EprEnsemble {
    /// Independent `|phi|^2` for both particles.
    Equilibrium,
    /// Each particle from `|phi|^2` narrowed by `narrowing` and displaced by
    /// `shift` packet widths.
    Displaced { narrowing: f64, shift: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EprConfig {
    /// Two-spin amplitudes `psi[i][j]` in the z basis (`i` for A, `j` for B; index 0 is up).
    pub amplitudes: [[C64; 2]; 2],
    pub m_a: [f64; 3],
    pub m_b: [f64; 3],
    pub m_b_prime: [f64; 3],
    pub wing_a: WingCoupling,
    pub wing_b: WingCoupling,
    /// Standard deviation of each particle's `|phi|^2`.
    pub width: f64,
    pub ensemble: EprEnsemble,
}

impl EprConfig {
    /// Singlet with settings `m_A = z`, `m_B = z`, `m_B' = x`.
    pub fn singlet(ensemble: EprEnsemble) -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let zero = C64::new(0.0, 0.0);
        Self {
            amplitudes: [[zero, C64::new(s, 0.0)], [C64::new(-s, 0.0), zero]],
            m_a: [0.0, 0.0, 1.0],
            m_b: [0.0, 0.0, 1.0],
            m_b_prime: [1.0, 0.0, 0.0],
            wing_a: WingCoupling { g: 1.0, duration: 5.0 },
            wing_b: WingCoupling { g: 1.0, duration: 5.0 },
            width: 1.0,
            ensemble,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in [self.m_a, self.m_b, self.m_b_prime] {
            let n = m.iter().map(|v| v * v).sum::<f64>();
            if (n - 1.0).abs() > 1e-12 {
                return Err(invalid("measurement directions must be unit vectors"));
            }
        }
        let z: f64 = self.amplitudes.iter().flatten().map(|c| c.norm_sqr()).sum();
        if (z - 1.0).abs() > 1e-12 {
            return Err(invalid("spin amplitudes must be normalized"));
        }
        if !(self.width > 0.0) {
            return Err(invalid("packet width must be positive"));
        }
        if let EprEnsemble::Displaced { narrowing, shift } = self.ensemble {
            if !(narrowing > 0.0 && shift.is_finite()) {
                return Err(invalid("displaced ensemble needs positive narrowing and finite shift"));
            }
        }
        for w in [self.wing_a, self.wing_b] {
            if !(w.g > 0.0 && w.duration > 0.0) {
                return Err(invalid("wing couplings need positive g and duration"));
            }
            let separation = 2.0 * w.g * w.duration;
            if !(separation > 6.0 * self.width) {
                return Err(Error::BranchOverlap { separation, required: 6.0 * self.width });
            }
        }
        Ok(())
    }
}

/// Eigenvectors of `m . sigma` for eigenvalues `+1`, `-1`.
fn spin_basis(m: [f64; 3]) -> [[C64; 2]; 2] {
    let theta = m[2].clamp(-1.0, 1.0).acos();
    let phi = m[1].atan2(m[0]);
    let (s, c) = (0.5 * theta).sin_cos();
    [
        [C64::new(c, 0.0), C64::from_polar(s, phi)],
        [-C64::from_polar(s, -phi), C64::new(c, 0.0)],
    ]
}

fn inner(a: &[C64; 2], b: &[C64; 2]) -> C64 {
    a[0].conj() * b[0] + a[1].conj() * b[1]
}

/// Velocity of a particle whose two spin branches carry weights `p_plus`,
/// `p_minus` and packets displaced by `+- g t`: `g (psi^dag m.sigma psi) / (psi^dag psi)`.
fn wing_velocity(x: f64, t: f64, g: f64, width: f64, p_plus: f64, p_minus: f64) -> Option<f64> {
    let s = 2.0 * width * width;
    let up = p_plus * (-(x - g * t).powi(2) / s).exp();
    let down = p_minus * (-(x + g * t).powi(2) / s).exp();
    let total = up + down;
    (total > 0.0 && total.is_finite()).then(|| g * (up - down) / total)
}

fn integrate_wing(x0: f64, w: &WingCoupling, width: f64, p_plus: f64, p_minus: f64, cfg: &IntegratorConfig) -> Result<f64> {
    let rhs = |t: f64, y: &[f64; 1]| wing_velocity(y[0], t, w.g, width, p_plus, p_minus).map(|v| [v]).ok_or(NodeHit);
    let out = ode::solve(rhs, [x0], 0.0, w.duration, &cfg.step_control(), |_| Flow::Continue);
    if !out.status.is_completed() {
        return Err(aborted(out.status));
    }
    Ok(out.y[0])
}

/// B is measured along `m_b`, then A along `m_a`; returns the outcomes `(A, B)`.
fn epr_outcomes(cfg: &EprConfig, m_b: [f64; 3], x: [f64; 2], ic: &IntegratorConfig) -> Result<(i8, i8)> {
    let bb = spin_basis(m_b);
    // A-spin vectors conditional on each B branch
    let a_of = |s: usize| -> [C64; 2] {
        let mut v = [C64::new(0.0, 0.0); 2];
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = cfg.amplitudes[i][0] * bb[s][0].conj() + cfg.amplitudes[i][1] * bb[s][1].conj();
        }
        v
    };
    let a = [a_of(0), a_of(1)];
    let pb = [inner(&a[0], &a[0]).re, inner(&a[1], &a[1]).re];
    let xb = integrate_wing(x[1], &cfg.wing_b, cfg.width, pb[0], pb[1], ic)?;
    let tb = cfg.wing_b.g * cfg.wing_b.duration;
    let s2 = 2.0 * cfg.width * cfg.width;
    let wb = [(-(xb - tb).powi(2) / s2).exp(), (-(xb + tb).powi(2) / s2).exp()];
    let ab = spin_basis(cfg.m_a);
    let pa = |r: usize| (0..2).map(|s| inner(&ab[r], &a[s]).norm_sqr() * wb[s]).sum::<f64>();
    let xa = integrate_wing(x[0], &cfg.wing_a, cfg.width, pa(0), pa(1), ic)?;
    let sign = |v: f64| if v > 0.0 { 1 } else { -1 };
    Ok((sign(xa), sign(xb)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EprPair {
    pub pair: u64,
    pub x0: [f64; 2],
    /// Outcome at A with B set to `m_b`, then to `m_b_prime`.
    pub a_b: i8,
    pub a_b_prime: i8,
}

#[derive(Clone, Debug, Serialize)]
pub struct EprResult {
    pub pairs: Vec<EprPair>,
    /// Fraction of pairs going from `+` to `-` at A when B switches setting.
    pub nu_plus_minus: f64,
    pub nu_minus_plus: f64,
    /// McNemar score of the two transition counts.
    pub balance_z: f64,
    /// Fraction of `+` at A under each B setting.
    pub marginal_b: f64,
    pub marginal_b_prime: f64,
    /// Two-proportion score for the change of the A marginal.
    pub signal_z: f64,
}

impl EprResult {
    /// Columns `pair_id,outcome_A_B,outcome_A_Bprime`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "pair_id,outcome_A_B,outcome_A_Bprime")?;
        for p in &self.pairs {
            writeln!(out, "{},{},{}", p.pair, p.a_b, p.a_b_prime)?;
        }
        Ok(())
    }
}

/// Paired EPR runs: each pair's initial positions are reused for both B settings.
pub fn run_epr(cfg: &EprConfig, n_pairs: u64, seed: u64, ic: &IntegratorConfig) -> Result<EprResult> {
    cfg.validate()?;
    let (centre, spread) = match cfg.ensemble {
        EprEnsemble::Equilibrium => (0.0, cfg.width),
        EprEnsemble::Displaced { narrowing, shift } => (shift * cfg.width, narrowing * cfg.width),
    };
    let normal = Normal::new(centre, spread).map_err(|e| invalid(e.to_string()))?;
    let pairs: Vec<EprPair> = (0..n_pairs)
        .into_par_iter()
        .map(|pair| {
            let mut rng = stream(seed, pair);
            let x0 = [normal.sample(&mut rng), normal.sample(&mut rng)];
            let (a_b, _) = epr_outcomes(cfg, cfg.m_b, x0, ic)?;
            let (a_b_prime, _) = epr_outcomes(cfg, cfg.m_b_prime, x0, ic)?;
            Ok(EprPair { pair, x0, a_b, a_b_prime })
        })
        .collect::<Result<_>>()?;
    let n = n_pairs as f64;
    let pm = pairs.iter().filter(|p| p.a_b > 0 && p.a_b_prime < 0).count() as u64;
    let mp = pairs.iter().filter(|p| p.a_b < 0 && p.a_b_prime > 0).count() as u64;
    let plus_b = pairs.iter().filter(|p| p.a_b > 0).count() as u64;
    let plus_bp = pairs.iter().filter(|p| p.a_b_prime > 0).count() as u64;
    Ok(EprResult {
        nu_plus_minus: pm as f64 / n,
        nu_minus_plus: mp as f64 / n,
        balance_z: stats::mcnemar_z(pm, mp),
        marginal_b: plus_b as f64 / n,
        marginal_b_prime: plus_bp as f64 / n,
        signal_z: stats::two_proportion_z(plus_bp, n_pairs, plus_b, n_pairs),
        pairs,
    })
}

// ---------------------------------------------------------- discrimination

/// Which of two candidate waves explains a tracked record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    First,
    Second,
    /// Both candidate trajectories stay within the tracking error of each other; decided by a coin.
    Inconclusive(bool),
}

impl Verdict {
    pub fn picks_first(self) -> bool {
        match self {
            Verdict::First => true,
            Verdict::Second => false,
            Verdict::Inconclusive(first) => first,
        }
    }
}

fn candidate<W: Wave1d + ?Sized>(wave: &W, x0: f64, times: &[f64], cfg: &IntegratorConfig) -> Option<Vec<f64>> {
    let mut xs = Vec::with_capacity(times.len());
    let mut x = x0;
    let mut t = times[0];
    for &ti in times {
        x = advance_1d(wave, x, t, ti, cfg).ok()?;
        t = ti;
        xs.push(x);
    }
    Some(xs)
}

/// Least-squares match of the estimates against each candidate's trajectory
/// from the first estimate. A candidate whose trajectory cannot be followed
/// (the start sits on a node or outside its support) is ruled out.
pub fn classify<W: Wave1d + ?Sized, R: Rng>(
    first: &W,
    second: &W,
    estimates: &[f64],
    times: &[f64],
    bound: f64,
    cfg: &IntegratorConfig,
    rng: &mut R,
) -> Verdict {
    let c1 = candidate(first, estimates[0], times, cfg);
    let c2 = candidate(second, estimates[0], times, cfg);
    let cost = |c: &Option<Vec<f64>>| {
        c.as_ref().map_or(f64::INFINITY, |xs| xs.iter().zip(estimates).map(|(a, b)| (a - b).powi(2)).sum())
    };
    if let (Some(a), Some(b)) = (&c1, &c2) {
        if a.iter().zip(b).all(|(p, q)| (p - q).abs() <= 2.0 * bound) {
            return Verdict::Inconclusive(rng.gen_bool(0.5));
        }
    }
    let (k1, k2) = (cost(&c1), cost(&c2));
    if k1.is_infinite() && k2.is_infinite() {
        return Verdict::Inconclusive(rng.gen_bool(0.5));
    }
    if k1 <= k2 {
        Verdict::First
    } else {
        Verdict::Second
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminationSetup {
    pub psi1: OscWave1d,
    pub psi2: OscWave1d,
    /// Pointer used at every sample; a top-hat ensemble sets the tracking error.
    pub coupling: PointerCoupling,
    pub horizon: f64,
    pub samples: usize,
    /// Runs per state.
    pub runs: u64,
}

impl DiscriminationSetup {
    /// `psi1 = (phi0 + phi1)/sqrt2`, `psi2 = (phi0 + e^{i theta} phi1)/sqrt2` with
    /// `|<psi1|psi2>| = overlap`.
    pub fn two_mode(overlap: f64, coupling: PointerCoupling) -> Result<Self> {
        if !(0.0..=1.0).contains(&overlap) {
            return Err(invalid("overlap must lie in [0, 1]"));
        }
        let theta = 2.0 * overlap.acos();
        let one = C64::new(1.0, 0.0);
        Ok(Self {
            psi1: OscWave1d::new(vec![one, one])?,
            psi2: OscWave1d::new(vec![one, C64::from_polar(1.0, theta)])?,
            coupling,
            horizon: 2.0,
            samples: 10,
            runs: 200,
        })
    }

    pub fn times(&self) -> Vec<f64> {
        let n = self.samples.max(2);
        (0..n).map(|k| self.horizon * k as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscriminationResult {
    pub overlap: f64,
    pub accuracy: f64,
    pub accuracy_first: f64,
    pub accuracy_second: f64,
    pub inconclusive_fraction: f64,
    /// Every run was inconclusive: the two trajectory families cannot be told apart.
    pub inconclusive: bool,
}

impl DiscriminationResult {
    pub fn check(&self) -> Result<()> {
        if self.inconclusive {
            Err(Error::Inconclusive)
        } else {
            Ok(())
        }
    }
}

/// Single-shot discrimination: each run prepares one of the two states, draws
/// the particle position from it, tracks the trajectory and classifies it.
pub fn discriminate_states(setup: &DiscriminationSetup, seed: u64, cfg: &IntegratorConfig) -> Result<DiscriminationResult> {
    setup.coupling.validate()?;
    let overlap = setup.psi1.overlap(&setup.psi2).norm();
    if !(overlap > 0.0) {
        return Err(invalid("states must overlap"));
    }
    let times = setup.times();
    let bound = setup.coupling.error_bound();
    let states = [&setup.psi1, &setup.psi2];
    let outcomes: Vec<(usize, Verdict)> = (0..2 * setup.runs)
        .into_par_iter()
        .map(|k| {
            let which = (k % 2) as usize;
            let psi = states[which];
            let mut rng = stream(seed, k);
            let half = psi.extent();
            let max = density_bound(-half, half, |x| psi.eval(x, 0.0).0.norm_sqr());
            let x0 = sample_1d(psi, half, max, &mut rng);
            let track = track_trajectory(psi, x0, &times, &setup.coupling, rng.gen(), cfg)?;
            let est: Vec<f64> = track.steps.iter().map(|s| s.x_hat).collect();
            Ok((which, classify(states[0], states[1], &est, &times, bound, cfg, &mut rng)))
        })
        .collect::<Result<_>>()?;
    let correct = |w: usize| {
        let of: Vec<_> = outcomes.iter().filter(|o| o.0 == w).collect();
        of.iter().filter(|o| o.1.picks_first() == (w == 0)).count() as f64 / of.len().max(1) as f64
    };
    let (a1, a2) = (correct(0), correct(1));
    let inconclusive = outcomes.iter().filter(|o| matches!(o.1, Verdict::Inconclusive(_))).count();
    Ok(DiscriminationResult {
        overlap,
        accuracy: 0.5 * (a1 + a2),
        accuracy_first: a1,
        accuracy_second: a2,
        inconclusive_fraction: inconclusive as f64 / outcomes.len() as f64,
        inconclusive: inconclusive == outcomes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pointer(g: f64, duration: f64, ensemble: PointerEnsemble) -> PointerCoupling {
        PointerCoupling { g, duration, width: 0.1, ensemble }
    }

    #[test]
    fn born_weights_from_equilibrium() {
        let setup = BranchingSetup::two_level(pointer(1.0, 1.0, PointerEnsemble::Equilibrium));
        let r = run_branching(&setup, SystemEnsemble::Equilibrium, 20_000, 5, &IntegratorConfig::default()).unwrap();
        for i in 0..2 {
            assert!((r.frequencies[i] - r.born[i]).abs() < 4.0 * r.errors[i].max(1e-3), "{:?}", r.frequencies);
        }
        assert!(r.chi_square.unwrap().p_value > 1e-3);
        // pointer ends at g omega t within a few widths
        for run in r.runs.iter().take(100) {
            assert!((run.q_end[1] - setup.eigenvalues[run.branch]).abs() < 0.6);
        }
    }

    #[test]
    fn single_branch_is_certain() {
        let mut setup = BranchingSetup::two_level(pointer(1.0, 1.0, PointerEnsemble::Equilibrium));
        setup.amplitudes = vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)];
        let r = run_branching(&setup, SystemEnsemble::Equilibrium, 500, 1, &IntegratorConfig::default()).unwrap();
        assert_eq!(r.counts, vec![0, 500]);
        assert!(r.chi_square.is_none());
    }

    #[test]
    fn nonequilibrium_violates_born() {
        let setup = BranchingSetup::two_level(pointer(1.0, 1.0, PointerEnsemble::Equilibrium));
        let r = run_branching(&setup, SystemEnsemble::Eigenfunction { n: 0 }, 2000, 2, &IntegratorConfig::default()).unwrap();
        assert_eq!(r.counts, vec![2000, 0]);
        assert!(r.chi_square.unwrap().sigma > 5.0);
    }

    #[test]
    fn weak_pointer_overlaps() {
        let setup = BranchingSetup::two_level(pointer(0.1, 1.0, PointerEnsemble::Equilibrium));
        assert!(matches!(
            run_branching(&setup, SystemEnsemble::Equilibrium, 10, 1, &IntegratorConfig::default()),
            Err(Error::BranchOverlap { .. })
        ));
    }

    #[test]
    fn branch_assignment_is_exclusive() {
        let setup = BranchingSetup::two_level(pointer(1.0, 1.0, PointerEnsemble::Equilibrium));
        let s = branching_state(&setup, 1.0);
        assert!(s.separation_ok);
        assert_eq!(s.assign(-3.0), 0);
        assert_eq!(s.assign(0.49), 0);
        assert_eq!(s.assign(0.51), 1);
        assert_eq!(s.assign(7.0), 1);
    }

    fn momentum_setup() -> MomentumSetup {
        MomentumSetup { p: 2.0, envelope: 3.0, coupling: PointerCoupling { g: 1.0, duration: 2.0, width: 0.3, ensemble: PointerEnsemble::Equilibrium } }
    }

    #[test]
    fn momentum_wave_matches_initial_profile() {
        let s = momentum_setup();
        for &x in &[-1.3, 0.0, 0.4, 2.2] {
            for &y in &[-0.2, 0.1] {
                let (psi, grad) = s.psi(x, y, 0.0);
                let (f, df) = s.psi0(x);
                let g0 = (-y * y / (4.0 * 0.09f64)).exp();
                // the closed form carries a constant factor 2 sqrt(pi) / sigma
                let c = 2.0 * PI.sqrt() / 3.0;
                assert!((psi - C64::new(c * f * g0, 0.0)).norm() < 1e-12);
                assert!((grad[0] - C64::new(c * df * g0, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_wave_gradient_matches_differences() {
        let s = momentum_setup();
        let h = 1e-6;
        let (x, y, t) = (0.3, 0.7, 1.1);
        let (_, g) = s.psi(x, y, t);
        let fx = (s.psi(x + h, y, t).0 - s.psi(x - h, y, t).0) / (2.0 * h);
        let fy = (s.psi(x, y + h, t).0 - s.psi(x, y - h, t).0) / (2.0 * h);
        assert!((g[0] - fx).norm() < 1e-6 * g[0].norm());
        assert!((g[1] - fy).norm() < 1e-6 * g[1].norm());
    }

    #[test]
    fn momentum_outcomes_are_plus_minus_p_with_zero_initial_velocity() {
        let s = momentum_setup();
        let r = momentum_demo(&s, MomentumEnsemble::Equilibrium, 2000, 3, &IntegratorConfig::default()).unwrap();
        assert_eq!(r.max_initial_speed, 0.0);
        assert!(r.z.abs() < 4.0, "{}", r.z);
        let c = s.p * s.coupling.strength();
        for run in &r.runs {
            assert!((run.q_end[1].abs() - c).abs() < 4.0 * s.branch_width());
        }
    }

    #[test]
    fn momentum_outcome_is_pointer_side() {
        let s = momentum_setup();
        let ic = IntegratorConfig::default();
        let skewed = momentum_demo(&s, MomentumEnsemble::Skewed { skew: 0.9 }, 1000, 4, &ic).unwrap();
        assert!(skewed.runs.iter().all(|r| r.outcome == if r.q0[1] > 0.0 { 1 } else { -1 }));
        assert!(skewed.z.abs() < 4.0);
        let pointer = momentum_demo(&s, MomentumEnsemble::PointerSkewed { skew: 0.5 }, 4000, 4, &ic).unwrap();
        assert!(pointer.z > 5.0, "{}", pointer.z);
    }

    #[test]
    fn subquantum_bound_holds_in_every_run() {
        let psi = OscWave1d::new(vec![C64::new(1.0, 0.0), C64::new(0.0, 1.0)]).unwrap();
        let c = PointerCoupling { g: 1.0, duration: 0.01, width: 1.0, ensemble: PointerEnsemble::TopHat { w: 1e-4 } };
        assert!((c.error_bound() - 5e-3).abs() < 1e-15);
        let r = subquantum_measure(&psi, &c, 2000, 1).unwrap();
        assert!(r.all_ok);
        assert!(r.runs.iter().all(|x| (x.x_hat - x.x0).abs() <= 5e-3 * (1.0 + 1e-12)));
    }

    #[test]
    fn equilibrium_pointer_gives_no_subquantum_gain() {
        let psi = OscWave1d::new(vec![C64::new(1.0, 0.0)]).unwrap();
        let c = PointerCoupling { g: 1.0, duration: 0.01, width: 1.0, ensemble: PointerEnsemble::Equilibrium };
        let r = subquantum_measure(&psi, &c, 2000, 1).unwrap();
        // error ~ width / (g t) = 100, far beyond the system spread of ~0.7
        assert!(r.rms_error > 50.0);
    }

    #[test]
    fn disturbance_vanishes_linearly() {
        let psi = OscWave1d::new(vec![C64::new(1.0, 0.0), C64::new(0.5, 0.5)]).unwrap();
        let c = PointerCoupling { g: 1.0, duration: 1.0, width: 1.0, ensemble: PointerEnsemble::TopHat { w: 1e-4 } };
        let s: Vec<f64> = (0..7).map(|i| 10f64.powf(-4.0 + 0.5 * i as f64)).collect();
        let (pts, slope) = disturbance_scaling(&psi, &c, &s).unwrap();
        assert!((slope - 1.0).abs() < 0.02, "{slope} {pts:?}");
    }

    #[test]
    fn kick_by_constant_is_identity() {
        let psi = OscWave1d::new(vec![C64::new(1.0, 0.0), C64::new(0.3, -0.2), C64::new(0.0, 0.4)]).unwrap();
        let rule = gauss_hermite(40);
        let k = psi.kicked(0.7, |_| 2.0, 20, &rule).unwrap();
        assert!(k.distance(&psi) < 1e-12);
    }

    #[test]
    fn tracking_static_ground_state() {
        let psi = OscWave1d::new(vec![C64::new(1.0, 0.0)]).unwrap();
        let c = PointerCoupling { g: 1.0, duration: 0.01, width: 1.0, ensemble: PointerEnsemble::TopHat { w: 2e-5 } };
        let times: Vec<f64> = (0..20).map(|i| 0.1 * i as f64).collect();
        let r = track_trajectory(&psi, 0.37, &times, &c, 4, &IntegratorConfig::default()).unwrap();
        for s in &r.steps {
            assert!((s.x_hat - 0.37).abs() <= s.bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn tracking_two_mode_state() {
        let psi = OscWave1d::new(vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        let c = PointerCoupling { g: 1.0, duration: 0.01, width: 1.0, ensemble: PointerEnsemble::TopHat { w: 2e-5 } };
        let times: Vec<f64> = (1..=20).map(|i| 0.15 * i as f64).collect();
        let r = track_trajectory(&psi, 0.2, &times, &c, 8, &IntegratorConfig::default()).unwrap();
        assert!(r.within_bounds);
        assert!(r.max_drift < 0.5 * c.error_bound(), "{}", r.max_drift);
        assert!(r.max_deviation < 1.1 * c.error_bound(), "{}", r.max_deviation);
        assert!(r.cumulative_disturbance < 1e-3);
        // evolution between kicks is unitary, so the kicks add up at most linearly
        assert!(r.cumulative_disturbance < 20.0 * r.single_step_disturbance * (1.0 + 1e-6));
        // the trajectory actually moves
        let span = r.steps.iter().map(|s| s.x_reference).fold(f64::NEG_INFINITY, f64::max)
            - r.steps.iter().map(|s| s.x_reference).fold(f64::INFINITY, f64::min);
        assert!(span > 0.1);
    }

    #[test]
    fn epr_identical_settings_never_flip() {
        let mut cfg = EprConfig::singlet(EprEnsemble::Equilibrium);
        cfg.m_b_prime = cfg.m_b;
        let r = run_epr(&cfg, 500, 1, &IntegratorConfig::default()).unwrap();
        assert_eq!(r.nu_plus_minus, 0.0);
        assert_eq!(r.nu_minus_plus, 0.0);
    }

    #[test]
    fn epr_outcomes_follow_quantiles() {
        // m_B = z: A is opposite to B, and B is up iff x_B0 > 0
        let cfg = EprConfig::singlet(EprEnsemble::Equilibrium);
        let ic = IntegratorConfig::default();
        for &(xa, xb) in &[(0.3, -0.8), (-1.2, 0.5), (0.9, 1.7)] {
            let (a, b) = epr_outcomes(&cfg, cfg.m_b, [xa, xb], &ic).unwrap();
            assert_eq!(b, if xb > 0.0 { 1 } else { -1 });
            assert_eq!(a, -b);
            // m_B' = x: A is then an x eigenstate measured along z, + iff x_A0 > 0
            let (a2, _) = epr_outcomes(&cfg, cfg.m_b_prime, [xa, xb], &ic).unwrap();
            assert_eq!(a2, if xa > 0.0 { 1 } else { -1 });
        }
    }

    #[test]
    fn epr_equilibrium_balances() {
        let cfg = EprConfig::singlet(EprEnsemble::Equilibrium);
        let r = run_epr(&cfg, 4000, 2, &IntegratorConfig::default()).unwrap();
        assert!(r.balance_z.abs() < 4.0 && r.signal_z.abs() < 4.0);
        assert!((r.nu_plus_minus - 0.25).abs() < 0.03);
    }

    #[test]
    fn epr_displaced_ensemble_signals() {
        let cfg = EprConfig::singlet(EprEnsemble::Displaced { narrowing: 0.5, shift: 0.5 });
        let r = run_epr(&cfg, 4000, 3, &IntegratorConfig::default()).unwrap();
        assert!(r.signal_z.abs() > 5.0, "{}", r.signal_z);
    }

    struct Bump(f64);

    impl Wave1d for Bump {
        fn eval(&self, x: f64, _t: f64) -> (C64, C64) {
            let s = x - self.0;
            if s.abs() >= 1.0 {
                return (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
            }
            let c = (0.5 * PI * s).cos();
            (C64::new(c * c, 0.0), C64::new(-PI * c * (0.5 * PI * s).sin(), 0.0))
        }
    }

    #[test]
    fn disjoint_supports_are_decided_by_position() {
        let (a, b) = (Bump(-2.0), Bump(2.0));
        let times = [0.0, 0.5, 1.0];
        let ic = IntegratorConfig::default();
        let mut rng = stream(1, 0);
        assert_eq!(classify(&a, &b, &[-2.1, -2.1, -2.1], &times, 1e-3, &ic, &mut rng), Verdict::First);
        assert_eq!(classify(&a, &b, &[1.7, 1.7, 1.7], &times, 1e-3, &ic, &mut rng), Verdict::Second);
    }

    #[test]
    fn identical_states_are_inconclusive() {
        let c = PointerCoupling { g: 1.0, duration: 0.01, width: 1.0, ensemble: PointerEnsemble::TopHat { w: 2e-5 } };
        let mut s = DiscriminationSetup::two_mode(1.0, c).unwrap();
        s.runs = 100;
        let r = discriminate_states(&s, 3, &IntegratorConfig::default()).unwrap();
        assert!(r.inconclusive);
        assert!(matches!(r.check(), Err(Error::Inconclusive)));
        assert!((r.accuracy - 0.5).abs() < 0.15);
    }
}
