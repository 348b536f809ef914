//! Flat FRW minisuperspace with a massless scalar: exact chiral Wheeler–DeWitt
//! solutions in `(u, phi)`, `u = ln a`, their guidance flow, and the
//! nonequilibrium timescale estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Write};

use crate::error::{invalid, Error, Result};
use crate::guidance::{endpoint, near_node, IntegratorConfig, Velocity};
use crate::io::fmt_f64;
use crate::ode::{self, Flow, NodeHit, Status};
use crate::psi::C64;
use crate::relaxation::{coarse_grain, hbar, CoarseGraining, DensityFn, GridSpec};
use crate::special::gauss_hermite;

/// Singularity guard on the scale factor.
pub const A_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Chirality {
    /// `exp[ik(phi - m_P u)]`: expanding for `k > 0`.
    #[serde(rename = "+")]
    Plus,
    /// `exp[ik(phi + m_P u)]`: contracting for `k > 0`.
    #[serde(rename = "-")]
    Minus,
}

impl Chirality {
    fn sign(self) -> f64 {
        match self {
            Chirality::Plus => -1.0,
            Chirality::Minus => 1.0,
        }
    }
}

/// One plane-wave component, serialized as `[k, re, im, chirality]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, f64, Chirality)", into = "(f64, f64, f64, Chirality)")]
pub struct MiniComponent {
    pub k: f64,
    pub c: C64,
    pub chirality: Chirality,
}

impl From<(f64, f64, f64, Chirality)> for MiniComponent {
    fn from((k, re, im, chirality): (f64, f64, f64, Chirality)) -> Self {
        Self { k, c: C64::new(re, im), chirality }
    }
}

impl From<MiniComponent> for (f64, f64, f64, Chirality) {
    fn from(m: MiniComponent) -> Self {
        (m.k, m.c.re, m.c.im, m.chirality)
    }
}

/// `Psi(a, phi) = sum_j c_j exp[i k_j (phi -+ m_P ln a)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiniWave {
    pub m_p: f64,
    pub components: Vec<MiniComponent>,
}

/// `Psi` with its first and second derivatives in `u = ln a` and `phi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiniDerivs {
    pub psi: C64,
    pub du: C64,
    pub dphi: C64,
    pub duu: C64,
    pub dphiphi: C64,
    /// Sum of the per-component magnitudes of the two operator terms, for scaling residuals.
    pub scale: f64,
}

/// Anything that can be evaluated like a minisuperspace wave.
pub trait MiniField: Sync {
    fn m_p(&self) -> f64;
    fn derivs(&self, a: f64, phi: f64) -> MiniDerivs;
}

impl MiniWave {
    pub fn new(m_p: f64, components: Vec<MiniComponent>) -> Result<Self> {
        let w = Self { m_p, components };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_p > 0.0 && self.m_p.is_finite()) {
            return Err(invalid("m_P must be positive"));
        }
        if self.components.is_empty() {
            return Err(invalid("minisuperspace wave needs at least one component"));
        }
        for c in &self.components {
            if c.k == 0.0 || !c.k.is_finite() || !(c.c.re.is_finite() && c.c.im.is_finite()) {
                return Err(invalid("components need finite nonzero k and finite amplitude"));
            }
        }
        Ok(())
    }

    pub fn single(m_p: f64, k: f64, chirality: Chirality) -> Result<Self> {
        Self::new(m_p, vec![MiniComponent { k, c: C64::new(1.0, 0.0), chirality }])
    }

    /// Two Gaussian packets in `k` (centre `k0`, width `sigma`) of opposite chirality,
    /// both centred on `phi -+ m_P u = 0` so they cross at `a = 1, phi = 0`.
    /// The `k` integral is a Gauss–Hermite sum with `nodes` points.
    pub fn bounce_packets(m_p: f64, k0: f64, sigma: f64, nodes: usize, minus_weight: C64) -> Result<Self> {
        if !(sigma > 0.0) || nodes == 0 {
            return Err(invalid("packet width and node count must be positive"));
        }
        let (x, w) = gauss_hermite(nodes);
        let mut components = Vec::with_capacity(2 * nodes);
        for (xi, wi) in x.iter().zip(&w) {
            let k = k0 + 2f64.sqrt() * sigma * xi;
            components.push(MiniComponent { k, c: C64::new(*wi, 0.0), chirality: Chirality::Plus });
            components.push(MiniComponent { k, c: minus_weight * *wi, chirality: Chirality::Minus });
        }
        Self::new(m_p, components)
    }

    /// Complex conjugate wave: reverses the guidance flow.
    pub fn conjugate(&self) -> Self {
        let components = self
            .components
            .iter()
            .map(|c| MiniComponent {
                k: -c.k,
                c: c.c.conj(),
                chirality: c.chirality,
            })
            .collect();
        Self { m_p: self.m_p, components }
    }

    pub fn psi(&self, a: f64, phi: f64) -> C64 {
        self.derivs(a, phi).psi
    }
}

impl MiniField for MiniWave {
    fn m_p(&self) -> f64 {
        self.m_p
    }

    fn derivs(&self, a: f64, phi: f64) -> MiniDerivs {
        let u = a.ln();
        let zero = C64::new(0.0, 0.0);
        let mut d = MiniDerivs { psi: zero, du: zero, dphi: zero, duu: zero, dphiphi: zero, scale: 0.0 };
        let i = C64::new(0.0, 1.0);
        for c in &self.components {
            let ku = c.chirality.sign() * c.k * self.m_p;
            let term = c.c * C64::from_polar(1.0, c.k * phi + ku * u);
            d.psi += term;
            d.du += i * ku * term;
            d.dphi += i * c.k * term;
            d.duu -= ku * ku * term;
            d.dphiphi -= c.k * c.k * term;
            d.scale += c.c.norm() * c.k * c.k;
        }
        d.scale /= 2.0 * a * a;
        d
    }
}

/// Relative residual of `(1/2m_P^2)(1/a) d_a(a d_a Psi) - (1/2a^2) d_phi^2 Psi`.
///
/// With `u = ln a` the first term is `(1/2m_P^2 a^2) d_u^2 Psi`; the residual is
/// scaled by the largest term magnitude (per component, so cancellations between
/// components do not inflate it).
pub fn wd_residual<F: MiniField + ?Sized>(wave: &F, a: f64, phi: f64) -> f64 {
    let d = wave.derivs(a, phi);
    let mp = wave.m_p();
    let t1 = d.duu / (2.0 * mp * mp * a * a);
    let t2 = d.dphiphi / (2.0 * a * a);
    let scale = d.scale.max(t1.norm()).max(t2.norm());
    if scale == 0.0 {
        0.0
    } else {
        (t1 - t2).norm() / scale
    }
}

/// `(a_dot, phi_dot) = (-(1/m_P^2 a) d_a S, (1/a^3) d_phi S)`.
pub fn mini_velocity<F: MiniField + ?Sized>(wave: &F, a: f64, phi: f64, node_floor: f64) -> Result<[f64; 2]> {
    if !(a > 0.0) {
        return Err(invalid("scale factor must be positive"));
    }
    let d = wave.derivs(a, phi);
    let grad_a = d.du / a;
    if near_node(d.psi, &[grad_a, d.dphi], node_floor) {
        return Err(Error::NodeProximity { density: d.psi.norm_sqr() });
    }
    let s_u = (d.du / d.psi).im;
    let s_phi = (d.dphi / d.psi).im;
    let mp = wave.m_p();
    Ok([-s_u / (mp * mp * a * a), s_phi / (a * a * a)])
}

/// The guidance flow as a velocity field on `q = (a, phi)`.
pub struct MiniFlow<'a, F: ?Sized>(pub &'a F);

impl<F: MiniField + ?Sized> Velocity for MiniFlow<'_, F> {
    fn velocity(&self, q: [f64; 2], _t: f64, node_floor: f64) -> Result<[f64; 2]> {
        mini_velocity(self.0, q[0], q[1], node_floor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MiniSample {
    pub t: f64,
    pub a: f64,
    pub phi: f64,
    pub a_dot: f64,
    pub phi_dot: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MiniTrajectory {
    pub samples: Vec<MiniSample>,
    /// Times where `a_dot` changes sign.
    pub bounces: Vec<f64>,
    /// `AbortedDomain` means the next step would take the scale factor below `a_min`.
    pub status: Status,
}

impl MiniTrajectory {
    pub fn last(&self) -> &MiniSample {
        self.samples.last().expect("trajectory has its initial sample")
    }

    pub fn hit_singularity(&self) -> bool {
        self.status == Status::AbortedDomain
    }

    /// Columns `t,a,phi,a_dot,phi_dot,bounce_flag`; the flag marks the sample closing a bounce step.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "# status = {}", self.status.as_str())?;
        writeln!(out, "t,a,phi,a_dot,phi_dot,bounce_flag")?;
        for (i, s) in self.samples.iter().enumerate() {
            let flag = i > 0 && flips(self.samples[i - 1].a_dot, s.a_dot);
            writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt_f64(s.t),
                fmt_f64(s.a),
                fmt_f64(s.phi),
                fmt_f64(s.a_dot),
                fmt_f64(s.phi_dot),
                flag as u8
            )?;
        }
        Ok(())
    }
}

fn flips(a: f64, b: f64) -> bool {
    (a < 0.0 && b > 0.0) || (a > 0.0 && b < 0.0)
}

/// Adaptive integration of the guidance flow, recording bounces and stopping at `a_min`.
pub fn integrate_mini<F: MiniField + ?Sized>(
    wave: &F,
    a0: f64,
    phi0: f64,
    t_span: [f64; 2],
    cfg: &IntegratorConfig,
    a_min: f64,
) -> Result<MiniTrajectory> {
    cfg.validate()?;
    if !(a0 > a_min) || !(a_min > 0.0) {
        return Err(invalid("need a0 > a_min > 0"));
    }
    if !(t_span[0].is_finite() && t_span[1].is_finite()) || t_span[0] == t_span[1] {
        return Err(invalid("time span must be finite and non-empty"));
    }
    let floor = cfg.node_floor;
    let v0 = mini_velocity(wave, a0, phi0, floor)?;
    let mut samples = vec![MiniSample { t: t_span[0], a: a0, phi: phi0, a_dot: v0[0], phi_dot: v0[1] }];
    // set when a trial stage reaches a_min; cleared by every accepted step
    let near_singular = std::cell::Cell::new(false);
    let rhs = |_t: f64, y: &[f64; 2]| {
        if y[0] <= a_min {
            near_singular.set(true);
            return Err(NodeHit);
        }
        mini_velocity(wave, y[0], y[1], floor).map_err(|_| NodeHit)
    };
    let mut out = ode::solve(rhs, [a0, phi0], t_span[0], t_span[1], &cfg.step_control(), |s| {
        near_singular.set(false);
        let y = s.y_new;
        samples.push(MiniSample { t: s.t_new(), a: y[0], phi: y[1], a_dot: s.f_new[0], phi_dot: s.f_new[1] });
        Flow::Continue
    });
    if out.status == Status::AbortedNode && near_singular.get() {
        out.status = Status::AbortedDomain;
    }
    if out.status.is_completed() {
        samples.last_mut().unwrap().t = t_span[1];
    }
    let mut bounces = Vec::new();
    for w in samples.windows(2) {
        if flips(w[0].a_dot, w[1].a_dot) {
            // linear interpolation of the zero of a_dot
            let s = w[0].a_dot / (w[0].a_dot - w[1].a_dot);
            bounces.push(w[0].t + s * (w[1].t - w[0].t));
        }
    }
    Ok(MiniTrajectory { samples, bounces, status: out.status })
}

/// Transported ensemble density on a window of `(a, phi)`, with the stationary
/// comparison density `a^2 |Psi|^2`.
#[derive(Clone, Debug)]
pub struct MiniDensity {
    pub window: GridSpec,
    pub t: f64,
    /// Transported `P`, unnormalized; 0 where masked.
    pub p: Vec<f64>,
    /// `a^2 |Psi|^2` at the same points.
    pub eq: Vec<f64>,
    pub mask: Vec<bool>,
    pub masked: usize,
}

/// Coarse-grained H against `a^2 |Psi|^2`, which is not normalizable on the full
/// minisuperspace: both densities are renormalized on the window only.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct WindowedHbar {
    pub hbar: f64,
    /// Always true: the value depends on the window and is not a global H-function.
    pub window_only: bool,
}

impl MiniDensity {
    /// Integral of `P` over the unmasked window points.
    pub fn mass(&self) -> f64 {
        self.p.iter().sum::<f64>() * self.window.area()
    }

    pub fn windowed_hbar(&self, cg: &CoarseGraining) -> Result<WindowedHbar> {
        let mass = self.mass();
        let eq_mass: f64 = self.eq.iter().zip(&self.mask).filter(|(_, m)| !**m).map(|(v, _)| v).sum::<f64>() * self.window.area();
        if !(mass > 0.0 && eq_mass > 0.0) {
            return Err(invalid("window holds no mass"));
        }
        let r: Vec<f64> = self.p.iter().map(|v| v / mass).collect();
        let e: Vec<f64> = self.eq.iter().map(|v| v / eq_mass).collect();
        let rc = coarse_grain(&r, &self.mask, &self.window, cg)?;
        let ec = coarse_grain(&e, &self.mask, &self.window, cg)?;
        Ok(WindowedHbar { hbar: hbar(&rc, &ec)?, window_only: true })
    }
}

/// Backtracks every window point to `t0` and carries `P0` forward with
/// `P / (a^2 |Psi|^2)` constant along trajectories.
pub fn ensemble_mini<F: MiniField + ?Sized, D: DensityFn>(
    wave: &F,
    p0: &D,
    window: &GridSpec,
    t0: f64,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<MiniDensity> {
    window.validate()?;
    if !(window.lo[0] > 0.0) {
        return Err(invalid("window must lie at a > 0"));
    }
    let flow = MiniFlow(wave);
    let eq = |q: [f64; 2]| q[0] * q[0] * wave.derivs(q[0], q[1]).psi.norm_sqr();
    let rows: Vec<(Option<f64>, f64)> = window
        .points()
        .par_iter()
        .map(|&q| {
            let e = eq(q);
            if t == t0 {
                return (Some(p0.value(q)), e);
            }
            if mini_velocity(wave, q[0], q[1], cfg.node_floor).is_err() {
                return (None, e);
            }
            let (q0, status) = endpoint(&flow, q, t, t0, cfg);
            if !status.is_completed() || !(q0[0] > 0.0) {
                return (None, e);
            }
            let e0 = eq(q0);
            ((e0 > 0.0).then(|| p0.value(q0) * e / e0), e)
        })
        .collect();
    let masked = rows.iter().filter(|r| r.0.is_none()).count();
    Ok(MiniDensity {
        window: *window,
        t,
        p: rows.iter().map(|r| r.0.unwrap_or(0.0)).collect(),
        eq: rows.iter().map(|r| r.1).collect(),
        mask: rows.iter().map(|r| r.0.is_none()).collect(),
        masked,
    })
}

/// `1 / (2 |<H2>|)`.
pub fn tau_nonequilibrium(h2_expectation: f64) -> Result<f64> {
    if h2_expectation == 0.0 {
        return Err(Error::DivergentTimescale);
    }
    if !h2_expectation.is_finite() {
        return Err(invalid("<H2> must be finite"));
    }
    Ok(1.0 / (2.0 * h2_expectation.abs()))
}

/// Black-hole parameters in Planck units (`M` in units of the Planck mass).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlackHoleParams {
    pub m_over_mp: f64,
    pub kappa: f64,
}

impl BlackHoleParams {
    pub fn new(m_over_mp: f64, kappa: f64) -> Result<Self> {
        let p = Self { m_over_mp, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_over_mp > 0.0 && self.m_over_mp.is_finite() && self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(invalid("black-hole mass and kappa must be positive and finite"));
        }
        Ok(())
    }
}

/// `tau / t_P = (48 pi / kappa) (M / m_P)^5`.
pub fn tau_black_hole(p: &BlackHoleParams) -> f64 {
    48.0 * PI / p.kappa * p.m_over_mp.powi(5)
}

/// `<H2> = -(kappa / 12) (m_P / M)^4 E` for a mode of energy `E` (Planck units).
pub fn h2_reduction(p: &BlackHoleParams, mode_energy: f64) -> f64 {
    -p.kappa / 12.0 * p.m_over_mp.powi(-4) * mode_energy
}

/// Columns `M_over_mP,kappa,tau_over_tP`.
pub fn write_tau_csv<W: Write>(rows: &[BlackHoleParams], out: &mut W) -> io::Result<()> {
    writeln!(out, "M_over_mP,kappa,tau_over_tP")?;
    for p in rows {
        writeln!(out, "{},{},{}", fmt_f64(p.m_over_mp), fmt_f64(p.kappa), fmt_f64(tau_black_hole(p)))?;
    }
    Ok(())
}
