//! Field modes as two-dimensional oscillators, static and on a radiation-dominated
//! expanding background (`m = a^3`, `omega = k / a`, `a = a0 (t / t0)^{1/2}`).
//!
//! Expanding modes are evolved on a grid by a per-axis Crank–Nicolson scheme with
//! a fourth-order compact (Numerov) Laplacian; the discrete Hamiltonian is
//! Hermitian, so every step is exactly unitary and exactly reversible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Write};

use crate::error::{invalid, Error, Result};
use crate::fit::{fit_xi, XiFit};
use crate::guidance::near_node;
use crate::io::fmt_f64;
use crate::psi::{Superposition, System, C64};
use crate::relaxation::{field_hbar, CoarseGraining, DensityField, GridSpec, HbarEntry, HbarSeries};
use crate::stats;

/// Edge-to-peak amplitude ratio above which a grid wave is considered to have hit the boundary.
pub const EDGE_LIMIT: f64 = 1e-10;

/// A comoving mode on a radiation-dominated background.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandingMode {
    pub k: f64,
    pub a0: f64,
    pub t0: f64,
}

impl ExpandingMode {
    pub fn new(k: f64, a0: f64, t0: f64) -> Result<Self> {
        let m = Self { k, a0, t0 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !([self.k, self.a0, self.t0].iter().all(|v| v.is_finite() && *v > 0.0)) {
            return Err(invalid("expanding mode needs positive finite k, a0, t0"));
        }
        Ok(())
    }

    pub fn scale_factor(&self, t: f64) -> f64 {
        self.a0 * (t / self.t0).sqrt()
    }

    pub fn mass(&self, t: f64) -> f64 {
        self.scale_factor(t).powi(3)
    }

    pub fn omega(&self, t: f64) -> f64 {
        self.k / self.scale_factor(t)
    }

    pub fn hubble(&self, t: f64) -> f64 {
        0.5 / t
    }

    pub fn lambda_phys(&self, t: f64) -> f64 {
        2.0 * PI * self.scale_factor(t) / self.k
    }

    /// `lambda_phys / H^{-1} = pi a / (k t)`.
    pub fn lambda_over_hubble(&self, t: f64) -> f64 {
        self.lambda_phys(t) * self.hubble(t)
    }

    /// Width unit `1 / sqrt(m omega)` of the instantaneous ground state at `t0`.
    pub fn length_unit(&self) -> f64 {
        1.0 / (self.a0 * self.k.sqrt())
    }
}

/// Time dependence of the mode oscillator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Background {
    /// Flat space: mass 1 and frequency `k`.
    Static { k: f64 },
    Expanding(ExpandingMode),
}

impl Background {
    pub fn mass(&self, t: f64) -> f64 {
        match self {
            Background::Static { .. } => 1.0,
            Background::Expanding(m) => m.mass(t),
        }
    }

    pub fn omega(&self, t: f64) -> f64 {
        match self {
            Background::Static { k } => *k,
            Background::Expanding(m) => m.omega(t),
        }
    }

    /// Oscillator with the instantaneous mass and frequency at `t`.
    pub fn instantaneous_system(&self, t: f64) -> System {
        System::Oscillator { mass: self.mass(t), omega: self.omega(t) }
    }
}

/// A flat-space field mode is the oscillator with unit mass and `omega = k`.
pub fn static_mode_as_oscillator(k: f64) -> Result<System> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(invalid("mode wavenumber must be positive"));
    }
    Ok(System::Oscillator { mass: 1.0, omega: k })
}

/// Complex wave on an `n x n` grid of interior points of `[-half, half]^2`,
/// with `psi = 0` on the boundary. Row-major, `values[j * n + i]` at `(x_i, x_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWave {
    pub n: usize,
    pub half: f64,
    pub t: f64,
    pub values: Vec<C64>,
}

impl GridWave {
    pub fn from_fn(n: usize, half: f64, t: f64, f: impl Fn([f64; 2]) -> C64 + Sync) -> Result<Self> {
        if n < 4 || !(half > 0.0 && half.is_finite()) {
            return Err(invalid("grid wave needs n >= 4 points per axis and a positive half-width"));
        }
        let h = 2.0 * half / (n + 1) as f64;
        let values = (0..n * n)
            .into_par_iter()
            .map(|k| f([-half + ((k % n) + 1) as f64 * h, -half + ((k / n) + 1) as f64 * h]))
            .collect();
        Ok(Self { n, half, t, values })
    }

    /// Samples a superposition at time `t`.
    pub fn from_superposition(s: &Superposition, n: usize, half: f64, t: f64) -> Result<Self> {
        Self::from_fn(n, half, t, |q| s.psi_and_grad(q, t).0)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half / (self.n + 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half + (i + 1) as f64 * self.spacing()
    }

    pub fn norm(&self) -> f64 {
        let h = self.spacing();
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * h * h
    }

    /// Largest amplitude on the outermost ring of points relative to the peak.
    pub fn edge_ratio(&self) -> f64 {
        let n = self.n;
        let peak = self.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut edge = 0.0f64;
        for i in 0..n {
            for &k in &[i, (n - 1) * n + i, i * n, i * n + n - 1] {
                edge = edge.max(self.values[k].norm());
            }
        }
        if peak > 0.0 {
            edge / peak
        } else {
            0.0
        }
    }

    pub fn check_domain(&self) -> Result<()> {
        let ratio = self.edge_ratio();
        if ratio > EDGE_LIMIT {
            return Err(Error::DomainOverflow { ratio, limit: EDGE_LIMIT });
        }
        Ok(())
    }

    /// Discrete L2 distance to a reference wave.
    pub fn l2_distance(&self, f: impl Fn([f64; 2]) -> C64 + Sync) -> f64 {
        let h = self.spacing();
        let n = self.n;
        let sum: f64 = (0..n * n)
            .into_par_iter()
            .map(|k| {
                let q = [self.coord(k % n), self.coord(k / n)];
                (self.values[k] - f(q)).norm_sqr()
            })
            .sum();
        (sum * h * h).sqrt()
    }

    /// `sqrt(<q1^2 + q2^2>)` under `|psi|^2`.
    pub fn rms_width(&self) -> f64 {
        let n = self.n;
        let (mut num, mut den) = (0.0, 0.0);
        for (k, v) in self.values.iter().enumerate() {
            let (x, y) = (self.coord(k % n), self.coord(k / n));
            num += v.norm_sqr() * (x * x + y * y);
            den += v.norm_sqr();
        }
        (num / den).sqrt()
    }

    fn at(&self, i: isize, j: isize) -> C64 {
        let n = self.n as isize;
        if i < 0 || j < 0 || i >= n || j >= n {
            C64::new(0.0, 0.0)
        } else {
            self.values[(j * n + i) as usize]
        }
    }

    /// Bicubic (4 x 4 Lagrange) interpolant of `psi` and its gradient; zero outside the domain.
    pub fn sample(&self, q: [f64; 2]) -> (C64, [C64; 2]) {
        let zero = C64::new(0.0, 0.0);
        if q.iter().any(|x| !(x.abs() < self.half)) {
            return (zero, [zero, zero]);
        }
        let h = self.spacing();
        let mut base = [0isize; 2];
        let mut w = [[0.0; 4]; 2];
        let mut dw = [[0.0; 4]; 2];
        for a in 0..2 {
            // node index m sits at -half + (m + 1) h; index -1 and n are the zero boundary
            let s = (q[a] + self.half) / h - 1.0;
            let b = (s.floor() as isize - 1).clamp(-1, self.n as isize - 3);
            base[a] = b;
            let u = s - b as f64;
            lagrange4(u, &mut w[a], &mut dw[a]);
            for d in &mut dw[a] {
                *d /= h;
            }
        }
        let (mut psi, mut gx, mut gy) = (zero, zero, zero);
        for jj in 0..4 {
            let mut row = zero;
            let mut row_dx = zero;
            for ii in 0..4 {
                let v = self.at(base[0] + ii as isize, base[1] + jj as isize);
                row += v * w[0][ii];
                row_dx += v * dw[0][ii];
            }
            psi += row * w[1][jj];
            gx += row_dx * w[1][jj];
            gy += row * dw[1][jj];
        }
        (psi, [gx, gy])
    }
}

/// Cubic Lagrange weights on nodes 0, 1, 2, 3 at position `u`, with derivatives.
fn lagrange4(u: f64, w: &mut [f64; 4], dw: &mut [f64; 4]) {
    let d = [u, u - 1.0, u - 2.0, u - 3.0];
    let denom = [-6.0, 2.0, -2.0, 6.0];
    for m in 0..4 {
        let mut p = 1.0;
        let mut dp = 0.0;
        for l in 0..4 {
            if l == m {
                continue;
            }
            dp = dp * d[l] + p;
            p *= d[l];
        }
        w[m] = p / denom[m];
        dw[m] = dp / denom[m];
    }
}

/// Time discretization of the grid evolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// Second order.
    CrankNicolson,
    /// Fourth-order symmetric triple-jump composition of Crank–Nicolson steps.
    Yoshida4,
}

/// Tridiagonal LU of `B + i sigma/2 K` along one axis, shared by every grid line.
struct AxisSolver {
    lower: Vec<C64>,
    inv_den: Vec<C64>,
    upper_ratio: Vec<C64>,
    /// Right-hand operator `B - i sigma/2 K`: (lower, diag, upper) per row.
    rhs: Vec<[C64; 3]>,
}

impl AxisSolver {
    fn new(coords: &[f64], h: f64, mass: f64, omega: f64, sigma: f64) -> Self {
        let n = coords.len();
        let v: Vec<f64> = coords.iter().map(|x| 0.5 * mass * omega * omega * x * x).collect();
        let kin_off = -0.5 / (mass * h * h);
        let kin_diag = 1.0 / (mass * h * h);
        let half = C64::new(0.0, 0.5 * sigma);
        let mut lower = vec![C64::new(0.0, 0.0); n];
        let mut diag = vec![C64::new(0.0, 0.0); n];
        let mut upper = vec![C64::new(0.0, 0.0); n];
        let mut rhs = vec![[C64::new(0.0, 0.0); 3]; n];
        for i in 0..n {
            let kl = if i > 0 { kin_off + v[i - 1] / 12.0 } else { 0.0 };
            let ku = if i + 1 < n { kin_off + v[i + 1] / 12.0 } else { 0.0 };
            let kd = kin_diag + 10.0 * v[i] / 12.0;
            let (bl, bu) = (if i > 0 { 1.0 / 12.0 } else { 0.0 }, if i + 1 < n { 1.0 / 12.0 } else { 0.0 });
            lower[i] = bl + half * kl;
            diag[i] = 10.0 / 12.0 + half * kd;
            upper[i] = bu + half * ku;
            rhs[i] = [bl - half * kl, 10.0 / 12.0 - half * kd, bu - half * ku];
        }
        let mut inv_den = vec![C64::new(0.0, 0.0); n];
        let mut upper_ratio = vec![C64::new(0.0, 0.0); n];
        let mut prev = C64::new(0.0, 0.0);
        for i in 0..n {
            let den = diag[i] - lower[i] * prev;
            inv_den[i] = 1.0 / den;
            upper_ratio[i] = upper[i] * inv_den[i];
            prev = upper_ratio[i];
        }
        Self { lower, inv_den, upper_ratio, rhs }
    }

    fn solve_line(&self, line: &mut [C64], scratch: &mut [C64]) {
        let n = line.len();
        for i in 0..n {
            let [l, d, u] = self.rhs[i];
            let mut r = d * line[i];
            if i > 0 {
                r += l * line[i - 1];
            }
            if i + 1 < n {
                r += u * line[i + 1];
            }
            scratch[i] = r;
        }
        let mut prev = C64::new(0.0, 0.0);
        for i in 0..n {
            prev = (scratch[i] - self.lower[i] * prev) * self.inv_den[i];
            scratch[i] = prev;
        }
        line[n - 1] = scratch[n - 1];
        for i in (0..n - 1).rev() {
            line[i] = scratch[i] - self.upper_ratio[i] * line[i + 1];
        }
    }
}

fn transpose(src: &[C64], dst: &mut [C64], n: usize) {
    for j in 0..n {
        for i in 0..n {
            dst[i * n + j] = src[j * n + i];
        }
    }
}

/// One Crank–Nicolson step of length `sigma` (any sign) with coefficients at `t_mid`.
fn cn_step(bg: &Background, wave: &mut GridWave, sigma: f64, t_mid: f64, buf: &mut Vec<C64>) {
    let n = wave.n;
    let coords: Vec<f64> = (0..n).map(|i| wave.coord(i)).collect();
    let solver = AxisSolver::new(&coords, wave.spacing(), bg.mass(t_mid), bg.omega(t_mid), sigma);
    let sweep = |data: &mut [C64]| {
        data.par_chunks_mut(n).for_each_init(|| vec![C64::new(0.0, 0.0); n], |scratch, line| {
            solver.solve_line(line, scratch)
        });
    };
    sweep(&mut wave.values);
    buf.resize(n * n, C64::new(0.0, 0.0));
    transpose(&wave.values, buf, n);
    sweep(buf);
    transpose(buf, &mut wave.values, n);
}

const YOSHIDA_W1: f64 = 1.351_207_191_959_657_6; // 1 / (2 - 2^{1/3})
const YOSHIDA_W0: f64 = -1.702_414_383_919_315_3; // -2^{1/3} / (2 - 2^{1/3})

/// One step of length `tau` (negative steps run backward and invert forward ones).
pub fn grid_step(bg: &Background, wave: &mut GridWave, tau: f64, scheme: TimeScheme, buf: &mut Vec<C64>) {
    let t = wave.t;
    match scheme {
        TimeScheme::CrankNicolson => cn_step(bg, wave, tau, t + 0.5 * tau, buf),
        TimeScheme::Yoshida4 => {
            let mut s = t;
            for w in [YOSHIDA_W1, YOSHIDA_W0, YOSHIDA_W1] {
                let sub = w * tau;
                cn_step(bg, wave, sub, s + 0.5 * sub, buf);
                s += sub;
            }
        }
    }
    wave.t = t + tau;
}

/// Evolves `wave` to `t1` in equal steps no longer than `dt_max`, then checks the domain.
pub fn evolve_grid_wave(bg: &Background, wave: &mut GridWave, t1: f64, dt_max: f64, scheme: TimeScheme) -> Result<()> {
    if !(dt_max > 0.0 && t1.is_finite()) {
        return Err(invalid("evolution needs a positive step bound and finite end time"));
    }
    let span = t1 - wave.t;
    if span == 0.0 {
        return Ok(());
    }
    let steps = (span.abs() / dt_max).ceil().max(1.0) as usize;
    let tau = span / steps as f64;
    let mut buf = Vec::new();
    for s in 0..steps {
        grid_step(bg, wave, tau, scheme, &mut buf);
        if s % 64 == 63 {
            wave.check_domain()?;
        }
    }
    wave.t = t1;
    wave.check_domain()
}

/// Settings of one expanding-mode relaxation run, with lengths in units of the
/// initial ground-state width `1 / (a0 sqrt(k))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeRelaxConfig {
    /// Modes per axis in the initial random-phase superposition.
    pub levels: u32,
    pub seed: u64,
    pub grid_n: usize,
    pub grid_half: f64,
    pub fine_n: usize,
    pub fine_half: f64,
    pub cell: f64,
    /// Width factor of the initial density relative to equilibrium.
    pub contraction: f64,
    /// Bound on `E_max * tau` for the grid steps.
    pub phase_step: f64,
    pub t1: f64,
    /// Number of sample times from `t0` to `t1`, inclusive.
    pub samples: usize,
    pub node_floor: f64,
}

impl Default for ModeRelaxConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            seed: 1,
            grid_n: 192,
            grid_half: 8.0,
            fine_n: 96,
            fine_half: 6.0,
            cell: 0.5,
            contraction: 0.5,
            phase_step: 0.25,
            t1: 4.0,
            samples: 5,
            node_floor: 1e-12,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeRun {
    pub k: f64,
    pub lambda_over_hubble_start: f64,
    pub lambda_over_hubble_end: f64,
    pub series: HbarSeries,
    /// `<q1^2 + q2^2>` under the transported density at each sample time.
    pub var_noneq: Vec<f64>,
    /// The same under `|psi|^2`.
    pub var_eq: Vec<f64>,
    /// Resolution error of the final variance ratio (every-second-point recomputation).
    pub xi_err: f64,
    pub norm_drift: f64,
    pub max_edge_ratio: f64,
    pub grid_steps: usize,
}

impl ModeRun {
    pub fn xi(&self) -> f64 {
        self.var_noneq.last().unwrap() / self.var_eq.last().unwrap()
    }

    pub fn hbar_ratio(&self) -> f64 {
        let e = &self.series.entries;
        e.last().unwrap().hbar / e[0].hbar
    }
}

struct Walker {
    q: [f64; 2],
    alive: bool,
}

fn grid_velocity(wave: &GridWave, q: [f64; 2], mass: f64, floor: f64) -> Option<[f64; 2]> {
    let (psi, g) = wave.sample(q);
    if near_node(psi, &g, floor) {
        return None;
    }
    Some([(g[0] / psi).im / mass, (g[1] / psi).im / mass])
}

fn variance(field: &DensityField, values: &[f64], stride: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for j in (0..field.grid.ny).step_by(stride) {
        for i in (0..field.grid.nx).step_by(stride) {
            let k = j * field.grid.nx + i;
            if field.mask[k] {
                continue;
            }
            let q = field.grid.point(i, j);
            num += values[k] * (q[0] * q[0] + q[1] * q[1]);
            den += values[k];
        }
    }
    num / den
}

/// Relaxation of one expanding mode: grid evolution forward to `t1`, then a
/// single backward replay that carries the backtracked fine points of every sample time.
pub fn mode_relax(mode: &ExpandingMode, cfg: &ModeRelaxConfig) -> Result<ModeRun> {
    mode.validate()?;
    if cfg.samples < 2 || !(cfg.t1 > mode.t0) || !(cfg.contraction > 0.0) || !(cfg.phase_step > 0.0) {
        return Err(invalid("mode run needs >= 2 samples, t1 > t0, positive contraction and phase step"));
    }
    let bg = Background::Expanding(*mode);
    let unit = mode.length_unit();
    let t0 = mode.t0;
    let system = bg.instantaneous_system(t0);
    let wave0 = Superposition::random_phases(system, cfg.levels, cfg.seed)?;
    // the superposition's reference time is 0, so shift it to t0 by sampling at t0 with phases as drawn
    let mut wave = GridWave::from_fn(cfg.grid_n, cfg.grid_half * unit, t0, |q| wave0.psi_and_grad(q, 0.0).0)?;
    wave.check_domain()?;
    let initial = wave.clone();
    let norm0 = wave.norm();

    let intervals = cfg.samples - 1;
    let e_max = (2 * cfg.levels - 1) as f64 * mode.omega(t0);
    let interval = (cfg.t1 - t0) / intervals as f64;
    let mut per_interval = (interval * e_max / cfg.phase_step).ceil() as usize;
    per_interval += per_interval % 2;
    per_interval = per_interval.max(2);
    let tau = interval / per_interval as f64;
    let total = per_interval * intervals;
    let scheme = TimeScheme::Yoshida4;

    let mut buf = Vec::new();
    let mut edge = wave.edge_ratio();
    for s in 0..total {
        grid_step(&bg, &mut wave, tau, scheme, &mut buf);
        if s % 64 == 63 {
            edge = edge.max(wave.edge_ratio());
            wave.check_domain()?;
        }
    }
    wave.t = cfg.t1;
    edge = edge.max(wave.edge_ratio());
    wave.check_domain()?;
    let norm_drift = (wave.norm() - norm0).abs() / norm0;

    // fine grids and cells follow the rms width of |psi|^2 at each sample time
    let width0 = initial.rms_width();
    let grid_at = |wave: &GridWave| {
        let r = wave.rms_width() / width0;
        (GridSpec::square(-cfg.fine_half * unit * r, cfg.fine_half * unit * r, cfg.fine_n), CoarseGraining { eps: cfg.cell * unit * r })
    };
    let (g0, cg0) = grid_at(&initial);
    cg0.factor(&g0)?;
    let times: Vec<f64> = (0..cfg.samples).map(|k| t0 + k as f64 * interval).collect();
    // walkers[k] backtracks the fine points of sample time k
    let mut walkers: Vec<Vec<Walker>> = (0..cfg.samples).map(|_| Vec::new()).collect();
    let mut psi2_at: Vec<Vec<f64>> = vec![Vec::new(); cfg.samples];
    let mut grids = vec![(g0, cg0); cfg.samples];
    let spawn = |wave: &GridWave| -> ((GridSpec, CoarseGraining), Vec<Walker>, Vec<f64>) {
        let g = grid_at(wave);
        let points = g.0.points();
        let psi2 = points.par_iter().map(|&q| wave.sample(q).0.norm_sqr()).collect();
        let w = points.iter().map(|&q| Walker { q, alive: true }).collect();
        (g, w, psi2)
    };
    (grids[intervals], walkers[intervals], psi2_at[intervals]) = spawn(&wave);

    let mut cur = wave;
    let mut mid = cur.clone();
    let mut next = cur.clone();
    for step in 0..total / 2 {
        mid.clone_from(&cur);
        grid_step(&bg, &mut mid, -tau, scheme, &mut buf);
        next.clone_from(&mid);
        grid_step(&bg, &mut next, -tau, scheme, &mut buf);
        let (t_c, t_m, t_n) = (cur.t, mid.t, next.t);
        let (m_c, m_m, m_n) = (bg.mass(t_c), bg.mass(t_m), bg.mass(t_n));
        let h = -2.0 * tau;
        let floor = cfg.node_floor;
        for set in walkers.iter_mut() {
            set.par_iter_mut().with_min_len(64).for_each(|w| {
                if !w.alive {
                    return;
                }
                let q = w.q;
                let step = || -> Option<[f64; 2]> {
                    let k1 = grid_velocity(&cur, q, m_c, floor)?;
                    let k2 = grid_velocity(&mid, [q[0] + 0.5 * h * k1[0], q[1] + 0.5 * h * k1[1]], m_m, floor)?;
                    let k3 = grid_velocity(&mid, [q[0] + 0.5 * h * k2[0], q[1] + 0.5 * h * k2[1]], m_m, floor)?;
                    let k4 = grid_velocity(&next, [q[0] + h * k3[0], q[1] + h * k3[1]], m_n, floor)?;
                    Some([
                        q[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                        q[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                    ])
                };
                match step() {
                    Some(p) => w.q = p,
                    None => w.alive = false,
                }
            });
        }
        std::mem::swap(&mut cur, &mut next);
        let done = 2 * (step + 1);
        if done % per_interval == 0 {
            let k = intervals - done / per_interval;
            if k > 0 {
                (grids[k], walkers[k], psi2_at[k]) = spawn(&cur);
            }
        }
    }

    // rho0 is the contracted equilibrium density at t0, and f = rho0 / |psi0|^2 is carried back
    let s = cfg.contraction;
    let psi2_0 = |q: [f64; 2]| initial.sample(q).0.norm_sqr();
    let rho0 = |q: [f64; 2]| psi2_0([q[0] / s, q[1] / s]) / (s * s);
    let mut series = HbarSeries::default();
    let (mut var_noneq, mut var_eq) = (Vec::new(), Vec::new());
    let mut xi_err = 0.0;
    for (k, &t) in times.iter().enumerate() {
        let (grid, cg) = grids[k];
        let area = grid.area();
        let (raw_rho, raw_psi2): (Vec<Option<f64>>, Vec<f64>) = if k == 0 {
            grid.points().par_iter().map(|&q| (Some(rho0(q)), psi2_0(q))).unzip()
        } else {
            walkers[k]
                .par_iter()
                .zip(&psi2_at[k])
                .map(|(w, &p)| {
                    if !w.alive {
                        return (None, p);
                    }
                    let d0 = psi2_0(w.q);
                    ((d0 > 0.0).then(|| p * rho0(w.q) / d0), p)
                })
                .unzip()
        };
        let masked = raw_rho.iter().filter(|r| r.is_none()).count();
        if masked as f64 > crate::relaxation::MAX_MASKED_FRACTION * grid.len() as f64 {
            return Err(Error::MeshTooCoarse { masked, total: grid.len() });
        }
        let zr: f64 = raw_rho.iter().flatten().sum::<f64>() * area;
        let zp: f64 = raw_rho.iter().zip(&raw_psi2).filter(|(r, _)| r.is_some()).map(|(_, p)| p).sum::<f64>() * area;
        let field = DensityField {
            grid,
            t,
            rho: raw_rho.iter().map(|r| r.map_or(0.0, |v| v / zr)).collect(),
            psi2: raw_rho.iter().zip(&raw_psi2).map(|(r, p)| if r.is_some() { p / zp } else { 0.0 }).collect(),
            mask: raw_rho.iter().map(|r| r.is_none()).collect(),
            masked,
            psi2_mass: raw_psi2.iter().sum::<f64>() * area,
        };
        let (h, err) = field_hbar(&field, &cg)?;
        series.entries.push(HbarEntry { t, hbar: h, err, masked });
        let (vn, ve) = (variance(&field, &field.rho, 1), variance(&field, &field.psi2, 1));
        var_noneq.push(vn);
        var_eq.push(ve);
        if k == intervals {
            let coarse = variance(&field, &field.rho, 2) / variance(&field, &field.psi2, 2);
            xi_err = (vn / ve - coarse).abs();
        }
    }
    Ok(ModeRun {
        k: mode.k,
        lambda_over_hubble_start: mode.lambda_over_hubble(t0),
        lambda_over_hubble_end: mode.lambda_over_hubble(cfg.t1),
        series,
        var_noneq,
        var_eq,
        xi_err,
        norm_drift,
        max_edge_ratio: edge,
        grid_steps: total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct XiPoint {
    pub k: f64,
    pub xi: f64,
    pub xi_err: f64,
    pub lambda_over_hubble_start: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct XiCurve {
    pub points: Vec<XiPoint>,
    pub fit: Option<XiFit>,
}

/// `xi(k)` from per-mode variance ratios at the common final time, sorted by `k`.
pub fn xi_of_k(runs: &[ModeRun]) -> Result<XiCurve> {
    let mut points: Vec<XiPoint> = runs
        .iter()
        .map(|r| XiPoint { k: r.k, xi: r.xi(), xi_err: r.xi_err, lambda_over_hubble_start: r.lambda_over_hubble_start })
        .collect();
    if points.iter().any(|p| !(p.xi > 0.0)) {
        return Err(invalid("variance ratio must be positive"));
    }
    points.sort_by(|a, b| a.k.total_cmp(&b.k));
    Ok(XiCurve { points, fit: None })
}

impl XiCurve {
    pub fn ks(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.k).collect()
    }

    pub fn xis(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.xi).collect()
    }

    pub fn fit(&mut self) -> Result<&XiFit> {
        let f = fit_xi(&self.ks(), &self.xis())?;
        Ok(self.fit.insert(f))
    }

    /// Largest relative deviation from the best non-decreasing fit.
    pub fn isotonic_residual(&self) -> f64 {
        stats::isotonic_residual(&self.xis())
    }

    /// Linear interpolation in `k`, clamped at the ends.
    pub fn interpolate(&self, k: f64) -> f64 {
        let p = &self.points;
        if k <= p[0].k {
            return p[0].xi;
        }
        for w in p.windows(2) {
            if k <= w[1].k {
                let s = (k - w[0].k) / (w[1].k - w[0].k);
                return w[0].xi + s * (w[1].xi - w[0].xi);
            }
        }
        p[p.len() - 1].xi
    }

    /// Columns `k,xi,xi_err,lambda_over_hubble_start`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        if let Some(f) = &self.fit {
            writeln!(out, "# fit: atan(c1 k / pi + c2) - pi / 2 + c3")?;
            writeln!(out, "# c1 = {}, c2 = {}, c3 = {}, r_squared = {}", fmt_f64(f.c1), fmt_f64(f.c2), fmt_f64(f.c3), fmt_f64(f.r_squared))?;
        }
        writeln!(out, "k,xi,xi_err,lambda_over_hubble_start")?;
        for p in &self.points {
            writeln!(out, "{},{},{},{}", fmt_f64(p.k), fmt_f64(p.xi), fmt_f64(p.xi_err), fmt_f64(p.lambda_over_hubble_start))?;
        }
        Ok(())
    }
}

/// Where `xi(k)` comes from when tabulating the spectrum.
pub enum XiSource<'a> {
    Fitted(&'a XiFit),
    Tabulated(&'a XiCurve),
    /// No suppression.
    Unity,
}

impl XiSource<'_> {
    pub fn xi(&self, k: f64) -> f64 {
        match self {
            XiSource::Fitted(f) => f.eval(k),
            XiSource::Tabulated(c) => c.interpolate(k),
            XiSource::Unity => 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Spectrum {
    pub rows: Vec<(f64, f64, f64)>,
    /// `P_R / P_QT` is non-decreasing in `k`, i.e. any deficit sits at small `k`.
    pub deficit_monotone: bool,
}

impl Spectrum {
    /// Columns `k,p_qt,p_r`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "# deficit_monotone = {}", self.deficit_monotone)?;
        writeln!(out, "k,p_qt,p_r")?;
        for &(k, a, b) in &self.rows {
            writeln!(out, "{},{},{}", fmt_f64(k), fmt_f64(a), fmt_f64(b))?;
        }
        Ok(())
    }
}

/// `P_R(k) = P_QT(k) xi(k)` on the given wavenumbers.
pub fn spectrum_deficit(p_qt: impl Fn(f64) -> f64, ks: &[f64], xi: &XiSource) -> Spectrum {
    let rows: Vec<(f64, f64, f64)> = ks.iter().map(|&k| (k, p_qt(k), p_qt(k) * xi.xi(k))).collect();
    let mut sorted: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.2 / r.1)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let deficit_monotone = sorted.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12 * w[0].1.abs());
    Spectrum { rows, deficit_monotone }
}

/// `n` log-spaced wavenumbers with `lambda / H^{-1}` at `t0` running from `ratio_hi` down to `ratio_lo`.
pub fn k_band(a0: f64, t0: f64, ratio_lo: f64, ratio_hi: f64, n: usize) -> Vec<f64> {
    // lambda / H^{-1} at t0 = pi a0 / (k t0)
    let k_of = |r: f64| PI * a0 / (r * t0);
    let (lo, hi) = (k_of(ratio_hi).ln(), k_of(ratio_lo).ln());
    (0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64).exp()).collect()
}
