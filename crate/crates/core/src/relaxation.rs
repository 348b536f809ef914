//! Ensemble-density transport by backtracking, coarse-graining and the
//! coarse-grained H-function, and the relaxation-time studies built on them.
//!
//! Along a trajectory `f = rho / |psi|^2` is constant, so the density at a
//! fine-grid point `q` at time `t` follows from the point `q0` it came from:
//! `rho(q, t) = |psi(q, t)|^2 rho0(q0) / |psi(q0, 0)|^2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Write};

use crate::error::{invalid, Error, Result};
use crate::fit::{fit_exponential_nonneg, ExpFit};
use crate::guidance::{endpoint, near_node, IntegratorConfig, Velocity, VelocityField, WaveFunction};
use crate::io::fmt_f64;
use crate::ode::{self, Flow, NodeHit, Status};
use crate::psi::{Superposition, System};
use crate::stats;

/// Largest tolerated fraction of fine points lost to node aborts.
pub const MAX_MASKED_FRACTION: f64 = 0.05;

/// A normalized density on configuration space.
pub trait DensityFn: Sync {
    fn value(&self, q: [f64; 2]) -> f64;
}

impl<F: Fn([f64; 2]) -> f64 + Sync> DensityFn for F {
    fn value(&self, q: [f64; 2]) -> f64 {
        self(q)
    }
}

/// Product Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub center: [f64; 2],
    pub sigma: [f64; 2],
}

pub fn gaussian_initial(center: [f64; 2], sigma: [f64; 2]) -> Result<Gaussian> {
    if !(sigma[0] > 0.0 && sigma[1] > 0.0 && sigma.iter().chain(&center).all(|v| v.is_finite())) {
        return Err(invalid("Gaussian needs finite centre and positive widths"));
    }
    Ok(Gaussian { center, sigma })
}

impl DensityFn for Gaussian {
    fn value(&self, q: [f64; 2]) -> f64 {
        let u = (q[0] - self.center[0]) / self.sigma[0];
        let v = (q[1] - self.center[1]) / self.sigma[1];
        (-0.5 * (u * u + v * v)).exp() / (2.0 * PI * self.sigma[0] * self.sigma[1])
    }
}

/// `|psi(q, t)|^2` at a fixed time.
pub struct Equilibrium<'a, W: ?Sized> {
    pub wave: &'a W,
    pub t: f64,
}

impl<'a, W: WaveFunction + ?Sized> DensityFn for Equilibrium<'a, W> {
    fn value(&self, q: [f64; 2]) -> f64 {
        self.wave.density(q, self.t)
    }
}

/// `inner(c + (q - c) / s) / s^2`: the inner density squeezed about `c` by the factor `s`.
pub struct Contracted<D> {
    pub inner: D,
    pub center: [f64; 2],
    pub factor: f64,
}

impl<D: DensityFn> DensityFn for Contracted<D> {
    fn value(&self, q: [f64; 2]) -> f64 {
        let s = self.factor;
        let p = [self.center[0] + (q[0] - self.center[0]) / s, self.center[1] + (q[1] - self.center[1]) / s];
        self.inner.value(p) / (s * s)
    }
}

/// Cell-centred fine grid over a rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo: [lo, lo], hi: [hi, hi], nx: n, ny: n }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(invalid("fine grid needs at least 2 points per axis"));
        }
        if !(0..2).all(|k| self.lo[k].is_finite() && self.hi[k].is_finite() && self.lo[k] < self.hi[k]) {
            return Err(invalid("grid bounds must be finite with lo < hi"));
        }
        Ok(())
    }

    pub fn spacing(&self) -> [f64; 2] {
        [(self.hi[0] - self.lo[0]) / self.nx as f64, (self.hi[1] - self.lo[1]) / self.ny as f64]
    }

    pub fn area(&self) -> f64 {
        let [dx, dy] = self.spacing();
        dx * dy
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `(i, j)` at the centre of its fine cell; row-major index `j * nx + i`.
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        let [dx, dy] = self.spacing();
        [self.lo[0] + (i as f64 + 0.5) * dx, self.lo[1] + (j as f64 + 0.5) * dy]
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        (0..self.ny).flat_map(|j| (0..self.nx).map(move |i| self.point(i, j))).collect()
    }

    /// Midpoint-rule mass of `|psi(., t)|^2` inside the bounds.
    pub fn equilibrium_mass<W: WaveFunction + ?Sized>(&self, wave: &W, t: f64) -> f64 {
        self.points().par_iter().map(|&q| wave.density(q, t)).collect::<Vec<f64>>().iter().sum::<f64>() * self.area()
    }
}

/// Square coarse-graining cells of side `eps`, aligned with the fine grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseGraining {
    pub eps: f64,
}

impl CoarseGraining {
    /// Fine points per cell along each axis, or an error if `eps` does not tile the grid.
    pub fn factor(&self, grid: &GridSpec) -> Result<[usize; 2]> {
        grid.validate()?;
        let sp = grid.spacing();
        let mut f = [0; 2];
        for k in 0..2 {
            let ratio = self.eps / sp[k];
            let r = ratio.round();
            let n = if k == 0 { grid.nx } else { grid.ny };
            if !(r >= 1.0 && (ratio - r).abs() < 1e-9 * ratio && n % r as usize == 0) {
                return Err(invalid(format!(
                    "cell side {} is not a whole number of fine spacings dividing the grid (axis {k})",
                    self.eps
                )));
            }
            f[k] = r as usize;
        }
        Ok(f)
    }
}

/// Cell means; `None` marks a cell with no unmasked fine point.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMeans {
    pub ncx: usize,
    pub ncy: usize,
    pub area: f64,
    pub means: Vec<Option<f64>>,
}

/// Unweighted mean over unmasked fine points of each coarse cell. `stride`
/// keeps every `stride`-th fine point per axis (1 = all).
fn cell_means(values: &[f64], mask: &[bool], grid: &GridSpec, cg: &CoarseGraining, stride: usize) -> Result<CellMeans> {
    let [fx, fy] = cg.factor(grid)?;
    if values.len() != grid.len() || mask.len() != grid.len() {
        return Err(invalid("field does not match its grid"));
    }
    let (ncx, ncy) = (grid.nx / fx, grid.ny / fy);
    let mut sum = vec![0.0; ncx * ncy];
    let mut count = vec![0usize; ncx * ncy];
    for j in (0..grid.ny).step_by(stride) {
        for i in (0..grid.nx).step_by(stride) {
            let k = j * grid.nx + i;
            if mask[k] {
                continue;
            }
            let c = (j / fy) * ncx + i / fx;
            sum[c] += values[k];
            count[c] += 1;
        }
    }
    let means = sum.iter().zip(&count).map(|(&s, &n)| (n > 0).then(|| s / n as f64)).collect();
    Ok(CellMeans { ncx, ncy, area: cg.eps * cg.eps, means })
}

/// Coarse-grains a fine-grid field (masked points excluded).
pub fn coarse_grain(values: &[f64], mask: &[bool], grid: &GridSpec, cg: &CoarseGraining) -> Result<CellMeans> {
    cell_means(values, mask, grid, cg, 1)
}

/// `sum_cells area * r ln(r / p)` after normalizing both cell sets over the
/// cells they share; `0 ln(0 / p) = 0`, and `r > 0` with `p = 0` gives `+inf`.
pub fn hbar(rho: &CellMeans, psi2: &CellMeans) -> Result<f64> {
    if rho.ncx != psi2.ncx || rho.ncy != psi2.ncy || rho.area != psi2.area {
        return Err(Error::DomainMismatch(format!(
            "{}x{} cells of area {} vs {}x{} of area {}",
            rho.ncx, rho.ncy, rho.area, psi2.ncx, psi2.ncy, psi2.area
        )));
    }
    if rho.means.iter().zip(&psi2.means).any(|(a, b)| a.is_some() != b.is_some()) {
        return Err(Error::DomainMismatch("included cells differ".into()));
    }
    Ok(hbar_shared(rho, psi2))
}

fn hbar_shared(rho: &CellMeans, psi2: &CellMeans) -> f64 {
    let pairs: Vec<(f64, f64)> = rho
        .means
        .iter()
        .zip(&psi2.means)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .collect();
    let zr: f64 = pairs.iter().map(|p| p.0).sum::<f64>() * rho.area;
    let zp: f64 = pairs.iter().map(|p| p.1).sum::<f64>() * rho.area;
    let mut h = 0.0;
    for (r, p) in pairs {
        let (r, p) = (r / zr, p / zp);
        if r > 0.0 {
            if p <= 0.0 {
                return f64::INFINITY;
            }
            h += rho.area * r * (r / p).ln();
        }
    }
    h
}

/// Transported density on the fine grid at one time.
#[derive(Clone, Debug)]
pub struct DensityField {
    pub grid: GridSpec,
    pub t: f64,
    /// Normalized over unmasked points.
    pub rho: Vec<f64>,
    /// `|psi(q, t)|^2`, normalized over the same points.
    pub psi2: Vec<f64>,
    /// Points whose backtrack aborted (node contact or step budget).
    pub mask: Vec<bool>,
    pub masked: usize,
    /// Midpoint-rule equilibrium mass inside the bounds before renormalization.
    pub psi2_mass: f64,
}

impl DensityField {
    pub fn masked_fraction(&self) -> f64 {
        self.masked as f64 / self.grid.len() as f64
    }

    /// Columns `q1,q2,rho,psi2,mask`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "# t = {}", fmt_f64(self.t))?;
        writeln!(out, "# masked = {} of {}", self.masked, self.grid.len())?;
        writeln!(out, "q1,q2,rho,psi2,mask")?;
        for j in 0..self.grid.ny {
            for i in 0..self.grid.nx {
                let k = j * self.grid.nx + i;
                let q = self.grid.point(i, j);
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    fmt_f64(q[0]),
                    fmt_f64(q[1]),
                    fmt_f64(self.rho[k]),
                    fmt_f64(self.psi2[k]),
                    u8::from(self.mask[k])
                )?;
            }
        }
        Ok(())
    }
}

/// Unnormalized transported density at one point and the point it came from.
///
/// Returns `None` when the backtrack aborts or lands where `|psi|^2` vanishes.
pub fn pointwise_density<W, V, D>(
    wave: &W,
    field: &V,
    rho0: &D,
    q: [f64; 2],
    t: f64,
    cfg: &IntegratorConfig,
) -> Option<(f64, [f64; 2])>
where
    W: WaveFunction + ?Sized,
    V: Velocity + ?Sized,
    D: DensityFn + ?Sized,
{
    if t == 0.0 {
        return Some((rho0.value(q), q));
    }
    let (q0, status) = endpoint(field, q, t, 0.0, cfg);
    if status != Status::Completed {
        return None;
    }
    let d0 = wave.density(q0, 0.0);
    if !(d0 > 0.0) {
        return None;
    }
    Some((wave.density(q, t) * rho0.value(q0) / d0, q0))
}

/// Independent check of f-conservation at `q0`: Liouville's theorem for the
/// flow says `|psi(q_t, t)|^2 J(t) = |psi(q0, 0)|^2` with `J = det(dq_t / dq0)`.
/// `ln J` is integrated alongside the trajectory from `d ln J / dt = div v`,
/// so no finite differences enter. Returns the relative deviation of the two
/// sides.
pub fn liouville_residual(wave: &Superposition, q0: [f64; 2], t: f64, cfg: &IntegratorConfig) -> Result<f64> {
    cfg.validate()?;
    let m = wave.system().mass();
    let rhs = |s: f64, y: &[f64; 3]| {
        let (v, lap) = wave.psi_and_laplacian([y[0], y[1]], s);
        let (psi, grad) = (v.psi, v.grad);
        if near_node(psi, &grad, cfg.node_floor) {
            return Err(NodeHit);
        }
        let (u1, u2) = (grad[0] / psi, grad[1] / psi);
        let div = (lap / psi - u1 * u1 - u2 * u2).im / m;
        Ok([u1.im / m, u2.im / m, div])
    };
    let out = ode::solve(rhs, [q0[0], q0[1], 0.0], 0.0, t, &cfg.step_control(), |_| Flow::Continue);
    if out.status != Status::Completed {
        return Err(Error::TrajectoryAborted(out.status.as_str().to_string()));
    }
    let before = wave.density(q0, 0.0);
    Ok((wave.density([out.y[0], out.y[1]], t) * out.y[2].exp() - before).abs() / before)
}

/// Backtracks every fine point from `t` to 0 and applies f-conservation.
pub fn evolve_density<W, V, D>(
    wave: &W,
    field: &V,
    rho0: &D,
    grid: &GridSpec,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<DensityField>
where
    W: WaveFunction + ?Sized,
    V: Velocity + ?Sized,
    D: DensityFn + ?Sized,
{
    grid.validate()?;
    cfg.validate()?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(invalid(format!("transport time must be >= 0, got {t}")));
    }
    let points = grid.points();
    let raw: Vec<(Option<f64>, f64)> = points
        .par_iter()
        .with_min_len(16)
        .map(|&q| {
            let rho = pointwise_density(wave, field, rho0, q, t, cfg).map(|r| r.0);
            (rho, wave.density(q, t))
        })
        .collect();
    let area = grid.area();
    let masked = raw.iter().filter(|r| r.0.is_none()).count();
    if masked as f64 > MAX_MASKED_FRACTION * grid.len() as f64 {
        return Err(Error::MeshTooCoarse { masked, total: grid.len() });
    }
    let psi2_mass = raw.iter().map(|r| r.1).sum::<f64>() * area;
    let mask: Vec<bool> = raw.iter().map(|r| r.0.is_none()).collect();
    let zr: f64 = raw.iter().filter_map(|r| r.0).sum::<f64>() * area;
    let zp: f64 = raw.iter().filter(|r| r.0.is_some()).map(|r| r.1).sum::<f64>() * area;
    if !(zr > 0.0 && zp > 0.0) {
        return Err(invalid("transported density has no mass inside the grid"));
    }
    let rho = raw.iter().map(|r| r.0.map_or(0.0, |v| v / zr)).collect();
    let psi2 = raw.iter().map(|r| if r.0.is_some() { r.1 / zp } else { 0.0 }).collect();
    Ok(DensityField { grid: *grid, t, rho, psi2, mask, masked, psi2_mass })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HbarEntry {
    pub t: f64,
    pub hbar: f64,
    pub err: f64,
    pub masked: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct HbarSeries {
    pub entries: Vec<HbarEntry>,
    pub fit: Option<ExpFit>,
}

/// Floor on the error bar, covering summation roundoff in the cell sums.
const ERR_FLOOR: f64 = 1e-12;

/// `H` of a transported field together with its resolution error: the same
/// quantity recomputed from every second fine point per axis.
pub fn field_hbar(field: &DensityField, cg: &CoarseGraining) -> Result<(f64, f64)> {
    let r = coarse_grain(&field.rho, &field.mask, &field.grid, cg)?;
    let p = coarse_grain(&field.psi2, &field.mask, &field.grid, cg)?;
    let h = hbar(&r, &p)?;
    let [fx, fy] = cg.factor(&field.grid)?;
    let err = if fx % 2 == 0 && fy % 2 == 0 {
        let rs = cell_means(&field.rho, &field.mask, &field.grid, cg, 2)?;
        let ps = cell_means(&field.psi2, &field.mask, &field.grid, cg, 2)?;
        (h - hbar_shared(&rs, &ps)).abs()
    } else {
        f64::NAN
    };
    Ok((h, err + ERR_FLOOR * (1.0 + h.abs())))
}

impl HbarSeries {
    pub fn times(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.t).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.hbar).collect()
    }

    pub fn max_err(&self) -> f64 {
        self.entries.iter().map(|e| e.err).fold(0.0, f64::max)
    }

    /// Fits `a exp(-b t / 2 pi) + c` with `c >= 0` and stores the result.
    pub fn fit(&mut self) -> Result<&ExpFit> {
        let fit = fit_exponential_nonneg(&self.times(), &self.values())?;
        Ok(self.fit.insert(fit))
    }

    /// Largest `H(t) - H(0)` relative to `3 err(t)`; at most 1 when the H-theorem holds within error.
    pub fn h_theorem_margin(&self) -> f64 {
        let Some(first) = self.entries.first() else { return 0.0 };
        self.entries
            .iter()
            .map(|e| (e.hbar - first.hbar) / (3.0 * (e.err + first.err)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest rise `H(t_k) - min_{j<k} H(t_j)` relative to the combined `3 err`.
    pub fn monotonicity_margin(&self) -> f64 {
        let mut best: Option<HbarEntry> = None;
        let mut worst = f64::NEG_INFINITY;
        for e in &self.entries {
            if let Some(b) = best {
                worst = worst.max((e.hbar - b.hbar) / (3.0 * (e.err + b.err)));
            }
            if best.map_or(true, |b| e.hbar < b.hbar) {
                best = Some(*e);
            }
        }
        worst
    }

    /// Columns `t,hbar,err`; the fit, if any, goes into header comments.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        if let Some(f) = &self.fit {
            writeln!(out, "# fit: a exp(-b t / 2 pi) + c")?;
            writeln!(out, "# a = {}, b = {}, c = {}", fmt_f64(f.a), fmt_f64(f.b), fmt_f64(f.c))?;
            writeln!(out, "# tau = {}, tau_err = {}, degenerate = {}", fmt_f64(f.tau()), fmt_f64(f.tau_err()), f.degenerate)?;
        }
        writeln!(out, "t,hbar,err")?;
        for e in &self.entries {
            writeln!(out, "{},{},{}", fmt_f64(e.t), fmt_f64(e.hbar), fmt_f64(e.err))?;
        }
        Ok(())
    }
}

/// `H(t)` at each requested time. `on_field` sees every transported field
/// (for snapshots) before it is dropped.
#[allow(clippy::too_many_arguments)]
pub fn hbar_series<W, V, D>(
    wave: &W,
    field: &V,
    rho0: &D,
    grid: &GridSpec,
    cg: &CoarseGraining,
    times: &[f64],
    cfg: &IntegratorConfig,
    mut on_field: impl FnMut(usize, &DensityField) -> Result<()>,
) -> Result<HbarSeries>
where
    W: WaveFunction + ?Sized,
    V: Velocity + ?Sized,
    D: DensityFn + ?Sized,
{
    if times.first() != Some(&0.0) {
        return Err(invalid("H series must start at t = 0"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("sample times must increase"));
    }
    let [fx, fy] = cg.factor(grid)?;
    if fx % 2 != 0 || fy % 2 != 0 {
        return Err(invalid("cells need an even number of fine points per axis for the error estimate"));
    }
    let mut series = HbarSeries::default();
    for (k, &t) in times.iter().enumerate() {
        let f = evolve_density(wave, field, rho0, grid, t, cfg)?;
        if f.psi2_mass < 1.0 - 1e-6 {
            return Err(invalid(format!(
                "grid bounds hold only {} of the equilibrium mass at t = {t}",
                f.psi2_mass
            )));
        }
        let (h, err) = field_hbar(&f, cg)?;
        series.entries.push(HbarEntry { t, hbar: h, err, masked: f.masked });
        on_field(k, &f)?;
    }
    Ok(series)
}

/// Ground-state density `(4 / pi^2) sin^2 x sin^2 y` of the box.
pub fn box_ground_density(q: [f64; 2]) -> f64 {
    if !(0.0..=PI).contains(&q[0]) || !(0.0..=PI).contains(&q[1]) {
        return 0.0;
    }
    4.0 / (PI * PI) * (q[0].sin() * q[1].sin()).powi(2)
}

/// Settings shared by all runs of a scaling study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    /// Number of modes per run; each must be a perfect square (`levels^2`).
    pub m_list: Vec<u32>,
    /// Fine points per axis over the box `[0, pi]^2`.
    pub n: usize,
    /// Coarse cells per axis.
    pub cells: usize,
    pub t_end: f64,
    pub samples: usize,
    /// Phase seeds; `tau` is averaged over them for each `M`.
    pub seeds: Vec<u64>,
    pub integrator: IntegratorConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingPoint {
    pub m: u32,
    pub tau: f64,
    pub tau_err: f64,
    /// `1 - H(t_end) / H(0)`, averaged over seeds.
    pub decrease: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingStudy {
    pub points: Vec<ScalingPoint>,
    /// Spearman correlation of `tau` against `1 / M`.
    pub rank_corr_inv_m: f64,
    /// Least-squares slope of `ln tau` against `ln M`.
    pub loglog_slope: f64,
}

impl ScalingStudy {
    pub fn strictly_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].tau < w[0].tau)
    }

    /// Columns `M,tau,tau_err`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "# spearman(tau, 1/M) = {}", fmt_f64(self.rank_corr_inv_m))?;
        writeln!(out, "# loglog slope = {}", fmt_f64(self.loglog_slope))?;
        writeln!(out, "M,tau,tau_err")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.m, fmt_f64(p.tau), fmt_f64(p.tau_err))?;
        }
        Ok(())
    }
}

fn uniform_times(t_end: f64, samples: usize) -> Vec<f64> {
    (0..samples).map(|k| t_end * k as f64 / (samples - 1) as f64).collect()
}

/// One box-system relaxation run with `levels^2` random-phase modes, starting from the ground-state density.
pub fn box_relaxation(levels: u32, seed: u64, cfg: &ScalingConfig) -> Result<HbarSeries> {
    let wave = Superposition::random_phases(System::Box, levels, seed)?;
    let field = VelocityField::new(&wave);
    let grid = GridSpec::square(0.0, PI, cfg.n);
    let cg = CoarseGraining { eps: PI / cfg.cells as f64 };
    let times = uniform_times(cfg.t_end, cfg.samples);
    let mut series = hbar_series(&wave, &field, &box_ground_density, &grid, &cg, &times, &cfg.integrator, |_, _| Ok(()))?;
    series.fit()?;
    Ok(series)
}

/// `tau(M)` for the box system at fixed cell size and initial density.
pub fn scaling_study(cfg: &ScalingConfig) -> Result<ScalingStudy> {
    if cfg.m_list.len() < 3 {
        return Err(invalid("scaling study needs at least three values of M"));
    }
    if cfg.seeds.is_empty() || cfg.samples < 5 {
        return Err(invalid("scaling study needs at least one seed and five samples"));
    }
    let mut points = Vec::new();
    for &m in &cfg.m_list {
        let levels = (m as f64).sqrt().round() as u32;
        if levels * levels != m || levels == 0 {
            return Err(invalid(format!("M = {m} is not a perfect square")));
        }
        let mut taus = Vec::new();
        let mut decreases = Vec::new();
        for &seed in &cfg.seeds {
            let s = box_relaxation(levels, seed, cfg)?;
            let fit = s.fit.expect("fitted");
            taus.push(fit.tau());
            let (h0, h1) = (s.entries[0].hbar, s.entries.last().unwrap().hbar);
            decreases.push(1.0 - h1 / h0);
        }
        let tau = stats::mean(&taus);
        let tau_err = if taus.len() > 1 {
            let var = taus.iter().map(|t| (t - tau).powi(2)).sum::<f64>() / (taus.len() - 1) as f64;
            (var / taus.len() as f64).sqrt()
        } else {
            f64::NAN
        };
        points.push(ScalingPoint { m, tau, tau_err, decrease: stats::mean(&decreases), per_seed: taus });
    }
    let inv_m: Vec<f64> = points.iter().map(|p| 1.0 / p.m as f64).collect();
    let tau: Vec<f64> = points.iter().map(|p| p.tau).collect();
    let ln_m: Vec<f64> = points.iter().map(|p| (p.m as f64).ln()).collect();
    let ln_tau: Vec<f64> = tau.iter().map(|t| t.ln()).collect();
    Ok(ScalingStudy {
        rank_corr_inv_m: stats::spearman(&tau, &inv_m)?,
        loglog_slope: stats::line_fit(&ln_m, &ln_tau)?.slope,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> Superposition {
        Superposition::random_phases(System::UNIT_OSCILLATOR, 5, 2024).unwrap()
    }

    fn quick_cfg() -> IntegratorConfig {
        IntegratorConfig::default().with_tolerance(1e-7, 1e-9)
    }

    #[test]
    fn gaussian_values() {
        let g = gaussian_initial([0.0, 0.0], [1.0, 1.0]).unwrap();
        assert!((g.value([0.0, 0.0]) - 1.0 / (2.0 * PI)).abs() < 1e-16);
        let grid = GridSpec::square(-8.0, 8.0, 256);
        let mass: f64 = grid.points().iter().map(|&q| g.value(q)).sum::<f64>() * grid.area();
        assert!((mass - 1.0).abs() < 1e-9);
        assert!(gaussian_initial([0.0, 0.0], [0.0, 1.0]).is_err());
    }

    #[test]
    fn gaussian_matches_direct_formula() {
        let g = gaussian_initial([1.0, 1.0], [0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let q: [f64; 2] = [rng.gen_range(-1.0..3.0), rng.gen_range(-1.0..3.0)];
            let r2 = (q[0] - 1.0).powi(2) + (q[1] - 1.0).powi(2);
            let direct = 2.0 / PI * (-2.0 * r2).exp();
            assert!((g.value(q) - direct).abs() <= 1e-15 * direct.max(1e-300));
        }
    }

    #[test]
    fn two_cell_toy() {
        let r = CellMeans { ncx: 2, ncy: 1, area: 1.0, means: vec![Some(1.0), Some(0.0)] };
        let p = CellMeans { ncx: 2, ncy: 1, area: 1.0, means: vec![Some(0.5), Some(0.5)] };
        assert!((hbar(&r, &p).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(hbar(&p, &p).unwrap(), 0.0);
        let q = CellMeans { ncx: 2, ncy: 1, area: 1.0, means: vec![Some(1.0), Some(0.0)] };
        assert_eq!(hbar(&p, &q).unwrap(), f64::INFINITY);
        let other = CellMeans { ncx: 1, ncy: 2, area: 1.0, means: vec![Some(0.5), Some(0.5)] };
        assert!(matches!(hbar(&r, &other), Err(Error::DomainMismatch(_))));
        let holed = CellMeans { ncx: 2, ncy: 1, area: 1.0, means: vec![Some(1.0), None] };
        assert!(matches!(hbar(&holed, &p), Err(Error::DomainMismatch(_))));
    }

    #[test]
    fn coarse_graining_basics() {
        let grid = GridSpec::square(0.0, 4.0, 8);
        let mask = vec![false; 64];
        let c = coarse_grain(&[2.0; 64], &mask, &grid, &CoarseGraining { eps: 1.0 }).unwrap();
        assert!(c.means.iter().all(|m| *m == Some(2.0)));
        let vals: Vec<f64> = (0..64).map(|k| k as f64).collect();
        let whole = coarse_grain(&vals, &mask, &grid, &CoarseGraining { eps: 4.0 }).unwrap();
        let total: f64 = vals.iter().sum::<f64>() * grid.area();
        assert_eq!(whole.means, vec![Some(total / 16.0)]);
        assert!(CoarseGraining { eps: 0.75 }.factor(&grid).is_err());
        assert!(CoarseGraining { eps: 1.5 }.factor(&grid).is_err());
    }

    #[test]
    fn refinement_reaggregates_exactly() {
        let grid = GridSpec::square(-2.0, 2.0, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mask = vec![false; 256];
        let fine = coarse_grain(&vals, &mask, &grid, &CoarseGraining { eps: 0.5 }).unwrap();
        let coarse = coarse_grain(&vals, &mask, &grid, &CoarseGraining { eps: 1.0 }).unwrap();
        for cj in 0..4 {
            for ci in 0..4 {
                let kids = [(0, 0), (1, 0), (0, 1), (1, 1)]
                    .iter()
                    .map(|(a, b)| fine.means[(2 * cj + b) * 8 + 2 * ci + a].unwrap())
                    .sum::<f64>()
                    / 4.0;
                assert!((kids - coarse.means[cj * 4 + ci].unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn density_at_time_zero_is_initial() {
        let s = reference();
        let f = VelocityField::new(&s);
        let g = gaussian_initial([0.0, 0.0], [0.8, 0.8]).unwrap();
        let grid = GridSpec::square(-8.0, 8.0, 32);
        let field = evolve_density(&s, &f, &g, &grid, 0.0, &quick_cfg()).unwrap();
        let pts = grid.points();
        let z: f64 = pts.iter().map(|&q| g.value(q)).sum::<f64>() * grid.area();
        for (k, q) in pts.iter().enumerate() {
            assert!((field.rho[k] - g.value(*q) / z).abs() < 1e-15);
        }
    }

    #[test]
    fn static_state_leaves_density_unchanged() {
        let s = Superposition::eigenstate(System::UNIT_OSCILLATOR, 0, 0).unwrap();
        let f = VelocityField::new(&s);
        let g = gaussian_initial([0.5, 0.0], [0.6, 0.9]).unwrap();
        let grid = GridSpec::square(-6.0, 6.0, 24);
        let a = evolve_density(&s, &f, &g, &grid, 0.0, &quick_cfg()).unwrap();
        let b = evolve_density(&s, &f, &g, &grid, 3.0, &quick_cfg()).unwrap();
        for (x, y) in a.rho.iter().zip(&b.rho) {
            assert!((x - y).abs() <= 1e-14 * x.max(1e-300));
        }
    }

    #[test]
    fn equilibrium_is_preserved() {
        let s = reference();
        let f = VelocityField::new(&s);
        let eq = Equilibrium { wave: &s, t: 0.0 };
        let grid = GridSpec::square(-6.0, 6.0, 24);
        let field = evolve_density(&s, &f, &eq, &grid, 2.0, &quick_cfg()).unwrap();
        for k in 0..grid.len() {
            if !field.mask[k] {
                assert!((field.rho[k] - field.psi2[k]).abs() <= 1e-9 * field.psi2[k]);
            }
        }
    }

    #[test]
    fn equilibrium_series_is_zero() {
        let s = reference();
        let f = VelocityField::new(&s);
        let eq = Equilibrium { wave: &s, t: 0.0 };
        let grid = GridSpec::square(-8.0, 8.0, 32);
        let cg = CoarseGraining { eps: 1.0 };
        let series = hbar_series(&s, &f, &eq, &grid, &cg, &[0.0, 1.0, 2.0], &quick_cfg(), |_, _| Ok(())).unwrap();
        for e in &series.entries {
            assert!(e.hbar.abs() <= e.err, "{e:?}");
        }
    }

    #[test]
    fn liouville_identity_holds_along_flow() {
        let s = reference();
        let cfg = IntegratorConfig::default().with_tolerance(1e-12, 1e-14);
        for q0 in [[0.3, -0.2], [-0.8, 0.5], [1.1, 0.9]] {
            let r = liouville_residual(&s, q0, 1.0, &cfg).unwrap();
            assert!(r < 1e-6, "{q0:?}: {r:e}");
        }
    }

    #[test]
    fn series_rejects_bad_inputs() {
        let s = reference();
        let f = VelocityField::new(&s);
        let g = gaussian_initial([0.0, 0.0], [1.0, 1.0]).unwrap();
        let grid = GridSpec::square(-8.0, 8.0, 32);
        let cg = CoarseGraining { eps: 1.0 };
        let cfg = quick_cfg();
        assert!(hbar_series(&s, &f, &g, &grid, &cg, &[1.0, 2.0], &cfg, |_, _| Ok(())).is_err());
        let small = GridSpec::square(-1.0, 1.0, 8);
        let cg_small = CoarseGraining { eps: 0.5 };
        assert!(hbar_series(&s, &f, &g, &small, &cg_small, &[0.0], &cfg, |_, _| Ok(())).is_err());
    }

    #[test]
    fn node_heavy_field_reports_coarse_mesh() {
        // a box state evaluated on a grid mostly outside the box: psi = 0 there
        let s = Superposition::eigenstate(System::Box, 1, 1).unwrap();
        let f = VelocityField::new(&s);
        let grid = GridSpec::square(-4.0, 4.0, 16);
        let r = evolve_density(&s, &f, &box_ground_density, &grid, 1.0, &quick_cfg());
        assert!(matches!(r, Err(Error::MeshTooCoarse { .. })));
    }

    #[test]
    fn h_decreases_for_short_run() {
        let s = reference();
        let f = VelocityField::new(&s);
        let g = gaussian_initial([0.0, 0.0], [0.5f64.sqrt(), 0.5f64.sqrt()]).unwrap();
        let grid = GridSpec::square(-8.0, 8.0, 64);
        let cg = CoarseGraining { eps: 1.0 };
        let series = hbar_series(&s, &f, &g, &grid, &cg, &[0.0, 1.0, 2.0], &quick_cfg(), |_, _| Ok(())).unwrap();
        assert!(series.entries[0].hbar > 0.1);
        assert!(series.h_theorem_margin() <= 1.0, "{series:?}");
    }

    #[test]
    fn margins_detect_rises() {
        let mk = |h: &[f64]| HbarSeries {
            entries: h.iter().enumerate().map(|(i, &v)| HbarEntry { t: i as f64, hbar: v, err: 0.01, masked: 0 }).collect(),
            fit: None,
        };
        assert!(mk(&[1.0, 0.8, 0.81, 0.5]).monotonicity_margin() <= 1.0);
        assert!(mk(&[1.0, 0.8, 0.9, 0.5]).monotonicity_margin() > 1.0);
        assert!(mk(&[1.0, 1.2]).h_theorem_margin() > 1.0);
    }

    #[test]
    fn box_ground_density_is_normalized() {
        let grid = GridSpec::square(0.0, PI, 64);
        let mass: f64 = grid.points().iter().map(|&q| box_ground_density(q)).sum::<f64>() * grid.area();
        assert!((mass - 1.0).abs() < 1e-12);
    }
}
