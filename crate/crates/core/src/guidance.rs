//! The de Broglie velocity field and trajectory integration.
//!
//! Velocities are `Im(grad psi / psi) / m(t)` for any [`WaveFunction`]; other
//! guidance laws (measurement couplings, minisuperspace) plug in through the
//! [`Velocity`] trait and share the same adaptive integrator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};

use crate::error::{invalid, Error, Result};
use crate::io::fmt_f64;
use crate::ode::{self, Flow, NodeHit, Status, StepControl};
use crate::psi::{Superposition, C64};

/// Anything that can report `psi` and its gradient at a configuration.
pub trait WaveFunction: Sync {
    fn psi_grad(&self, q: [f64; 2], t: f64) -> (C64, [C64; 2]);

    fn density(&self, q: [f64; 2], t: f64) -> f64 {
        self.psi_grad(q, t).0.norm_sqr()
    }

    /// True when `psi` is a real function times a global phase, so the phase
    /// gradient vanishes identically and velocities are exactly zero.
    fn is_real_up_to_phase(&self) -> bool {
        false
    }
}

impl WaveFunction for Superposition {
    fn psi_grad(&self, q: [f64; 2], t: f64) -> (C64, [C64; 2]) {
        self.psi_and_grad(q, t)
    }

    fn is_real_up_to_phase(&self) -> bool {
        self.is_stationary_real()
    }
}

impl<W: WaveFunction + ?Sized> WaveFunction for &W {
    fn psi_grad(&self, q: [f64; 2], t: f64) -> (C64, [C64; 2]) {
        (**self).psi_grad(q, t)
    }

    fn is_real_up_to_phase(&self) -> bool {
        (**self).is_real_up_to_phase()
    }
}

/// Node test shared by every guidance law.
///
/// `node_floor` bounds `|psi|^2 / |grad psi|^2`, the squared distance to the
/// nearest zero of `psi` to first order, so `1e-12` rejects points closer than
/// about `1e-6` to a node. Points where `psi` vanishes identically (outside a
/// box, or underflow) are always nodes. Far Gaussian tails, where `|psi|^2` is
/// tiny but the phase is smooth, are not.
pub fn near_node(psi: C64, grad: &[C64; 2], node_floor: f64) -> bool {
    let d = psi.norm_sqr();
    let g = grad[0].norm_sqr() + grad[1].norm_sqr();
    !(d > 0.0 && d.is_finite() && d > node_floor * g)
}

/// A configuration-space velocity law.
pub trait Velocity: Sync {
    fn velocity(&self, q: [f64; 2], t: f64, node_floor: f64) -> Result<[f64; 2]>;
}

/// `v = Im(grad psi / psi) / m(t)`.
pub struct VelocityField<'a, W: ?Sized, M = fn(f64) -> f64> {
    wave: &'a W,
    mass: M,
    real: bool,
}

fn unit_mass(_t: f64) -> f64 {
    1.0
}

impl<'a, W: WaveFunction + ?Sized> VelocityField<'a, W> {
    pub fn new(wave: &'a W) -> Self {
        Self { wave, mass: unit_mass, real: wave.is_real_up_to_phase() }
    }

    /// Constant mass other than one.
    pub fn with_constant_mass(wave: &'a W, mass: f64) -> VelocityField<'a, W, impl Fn(f64) -> f64 + Sync> {
        VelocityField { wave, mass: move |_t: f64| mass, real: wave.is_real_up_to_phase() }
    }
}

impl<'a, W: WaveFunction + ?Sized, M: Fn(f64) -> f64 + Sync> VelocityField<'a, W, M> {
    pub fn with_mass(wave: &'a W, mass: M) -> Self {
        Self { wave, mass, real: wave.is_real_up_to_phase() }
    }

    pub fn wave(&self) -> &W {
        self.wave
    }

    pub fn mass_at(&self, t: f64) -> f64 {
        (self.mass)(t)
    }
}

impl<'a, W: WaveFunction + ?Sized, M: Fn(f64) -> f64 + Sync> Velocity for VelocityField<'a, W, M> {
    fn velocity(&self, q: [f64; 2], t: f64, node_floor: f64) -> Result<[f64; 2]> {
        let (psi, grad) = self.wave.psi_grad(q, t);
        if near_node(psi, &grad, node_floor) {
            return Err(Error::NodeProximity { density: psi.norm_sqr() });
        }
        if self.real {
            return Ok([0.0, 0.0]);
        }
        let m = (self.mass)(t);
        Ok([(grad[0] / psi).im / m, (grad[1] / psi).im / m])
    }
}

impl<V: Velocity + ?Sized> Velocity for &V {
    fn velocity(&self, q: [f64; 2], t: f64, node_floor: f64) -> Result<[f64; 2]> {
        (**self).velocity(q, t, node_floor)
    }
}

/// Step-size and node-handling settings for trajectory integration.
/// Fields missing from a config file take their defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub node_floor: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            h_init: 1e-2,
            h_min: 1e-10,
            h_max: 0.5,
            node_floor: 1e-12,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.rel_tol, self.abs_tol, self.h_init, self.h_min, self.h_max, self.node_floor];
        if pos.iter().any(|x| !(x.is_finite() && *x > 0.0)) || self.max_steps == 0 {
            return Err(invalid("integrator settings must all be positive and finite"));
        }
        if !(self.h_min <= self.h_init && self.h_init <= self.h_max) {
            return Err(invalid("need h_min <= h_init <= h_max"));
        }
        Ok(())
    }

    pub fn with_tolerance(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = abs_tol;
        self
    }

    pub fn step_control(&self) -> StepControl {
        StepControl {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            h_init: self.h_init,
            h_min: self.h_min,
            h_max: self.h_max,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub q: [f64; 2],
    pub v: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub status: Status,
}

impl Trajectory {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory holds its start point")
    }

    /// CSV with columns `t,q1,q2,v1,v2`; the integrator settings are echoed as `#` comments.
    pub fn write_csv<W: Write>(&self, out: &mut W, cfg: &IntegratorConfig) -> io::Result<()> {
        writeln!(out, "# status = {}", self.status.as_str())?;
        writeln!(
            out,
            "# rel_tol = {}, abs_tol = {}, h_init = {}, h_min = {}, h_max = {}, node_floor = {}, max_steps = {}",
            cfg.rel_tol, cfg.abs_tol, cfg.h_init, cfg.h_min, cfg.h_max, cfg.node_floor, cfg.max_steps
        )?;
        writeln!(out, "t,q1,q2,v1,v2")?;
        for s in &self.samples {
            writeln!(
                out,
                "{},{},{},{},{}",
                fmt_f64(s.t),
                fmt_f64(s.q[0]),
                fmt_f64(s.q[1]),
                fmt_f64(s.v[0]),
                fmt_f64(s.v[1])
            )?;
        }
        Ok(())
    }
}

fn rhs<'a, V: Velocity + ?Sized>(
    field: &'a V,
    node_floor: f64,
) -> impl FnMut(f64, &[f64; 2]) -> std::result::Result<[f64; 2], NodeHit> + 'a {
    move |t, q| field.velocity(*q, t, node_floor).map_err(|_| NodeHit)
}

fn check_span(t0: f64, t1: f64) -> Result<()> {
    if !(t0.is_finite() && t1.is_finite()) || t0 == t1 {
        return Err(invalid(format!("integration span [{t0}, {t1}] is empty or not finite")));
    }
    Ok(())
}

/// Integrates one trajectory, recording every accepted step.
pub fn integrate<V: Velocity + ?Sized>(
    field: &V,
    q0: [f64; 2],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_span(t0, t1)?;
    let v0 = field.velocity(q0, t0, cfg.node_floor)?;
    let mut samples = vec![Sample { t: t0, q: q0, v: v0 }];
    let out = ode::solve(rhs(field, cfg.node_floor), q0, t0, t1, &cfg.step_control(), |s| {
        samples.push(Sample { t: s.t_new(), q: s.y_new, v: s.f_new });
        Flow::Continue
    });
    if let Some(last) = samples.last_mut() {
        // the final step lands on t1 exactly
        if out.status.is_completed() {
            last.t = t1;
        }
    }
    Ok(Trajectory { samples, status: out.status })
}

/// Integrates one trajectory and reports it at the requested times via dense output.
///
/// `times` must be ordered in the direction of integration, starting at or after `t0`.
pub fn integrate_sampled<V: Velocity + ?Sized>(
    field: &V,
    q0: [f64; 2],
    t0: f64,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let Some(&t_end) = times.last() else {
        return Ok(Trajectory { samples: Vec::new(), status: Status::Completed });
    };
    let dir = (t_end - t0).signum();
    if times.windows(2).any(|w| (w[1] - w[0]) * dir <= 0.0) || (times[0] - t0) * dir < 0.0 {
        return Err(invalid("sample times must be strictly monotone away from t0"));
    }
    let v0 = field.velocity(q0, t0, cfg.node_floor)?;
    let mut samples = Vec::with_capacity(times.len());
    let mut next = 0;
    while next < times.len() && times[next] == t0 {
        samples.push(Sample { t: t0, q: q0, v: v0 });
        next += 1;
    }
    if next == times.len() {
        return Ok(Trajectory { samples, status: Status::Completed });
    }
    let out = ode::solve(rhs(field, cfg.node_floor), q0, t0, t_end, &cfg.step_control(), |s| {
        while next < times.len() && s.contains(times[next]) {
            let t = times[next];
            let q = if t == s.t_new() { s.y_new } else { s.at(t) };
            let v = if t == s.t_new() {
                s.f_new
            } else {
                field.velocity(q, t, cfg.node_floor).unwrap_or([f64::NAN; 2])
            };
            samples.push(Sample { t, q, v });
            next += 1;
        }
        Flow::Continue
    });
    if out.status.is_completed() && next < times.len() {
        // t_end itself, if the last step stopped a hair short of it
        let v = field.velocity(out.y, t_end, cfg.node_floor).unwrap_or([f64::NAN; 2]);
        samples.push(Sample { t: t_end, q: out.y, v });
    }
    Ok(Trajectory { samples, status: out.status })
}

/// Endpoint of the trajectory through `(q0, t0)` at `t1`, without storing the path.
pub fn endpoint<V: Velocity + ?Sized>(
    field: &V,
    q0: [f64; 2],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> ([f64; 2], Status) {
    if t0 == t1 {
        return match field.velocity(q0, t0, cfg.node_floor) {
            Ok(_) => (q0, Status::Completed),
            Err(_) => (q0, Status::AbortedNode),
        };
    }
    let out = ode::solve(rhs(field, cfg.node_floor), q0, t0, t1, &cfg.step_control(), |_| Flow::Continue);
    (out.y, out.status)
}

/// Order-preserving batch of endpoints. Points are integrated in parallel; each
/// carries its own status and no point can fail the batch.
pub fn flow_map<V: Velocity + ?Sized>(
    field: &V,
    points: &[[f64; 2]],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Vec<([f64; 2], Status)> {
    points.par_iter().map(|&q| endpoint(field, q, t0, t1, cfg)).collect()
}

/// Finite-time divergence rate `ln(|dq(t1)| / |dq(t0)|) / (t1 - t0)` of two
/// trajectories started `separation` apart along `q1`. A chaos diagnostic only.
pub fn divergence_rate<V: Velocity + ?Sized>(
    field: &V,
    q0: [f64; 2],
    separation: f64,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Option<f64> {
    let (a, sa) = endpoint(field, q0, t0, t1, cfg);
    let (b, sb) = endpoint(field, [q0[0] + separation, q0[1]], t0, t1, cfg);
    if !(sa.is_completed() && sb.is_completed()) {
        return None;
    }
    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    Some((d / separation).ln() / (t1 - t0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psi::{Mode, System};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `exp(i p q1)` times the oscillator ground state in `q2`.
    struct PlaneWave {
        p: f64,
    }

    impl WaveFunction for PlaneWave {
        fn psi_grad(&self, q: [f64; 2], _t: f64) -> (C64, [C64; 2]) {
            let g = (-0.5 * q[1] * q[1]).exp();
            let psi = C64::from_polar(g, self.p * q[0]);
            (psi, [psi * C64::new(0.0, self.p), psi * (-q[1])])
        }
    }

    fn reference() -> Superposition {
        Superposition::random_phases(System::UNIT_OSCILLATOR, 5, 2024).unwrap()
    }

    #[test]
    fn real_eigenstate_has_zero_velocity() {
        let s = Superposition::eigenstate(System::UNIT_OSCILLATOR, 2, 3).unwrap();
        let f = VelocityField::new(&s);
        assert_eq!(f.velocity([0.3, -1.2], 4.0, 1e-12).unwrap(), [0.0, 0.0]);
        let cfg = IntegratorConfig::default();
        let traj = integrate(&f, [0.3, -1.2], 0.0, 7.0, &cfg).unwrap();
        assert_eq!(traj.last().q, [0.3, -1.2]);
        assert_eq!(traj.status, Status::Completed);
    }

    #[test]
    fn plane_wave_moves_uniformly() {
        let w = PlaneWave { p: 1.7 };
        let f = VelocityField::new(&w);
        let v = f.velocity([0.2, 0.0], 0.0, 1e-12).unwrap();
        assert!((v[0] - 1.7).abs() < 1e-15 && v[1] == 0.0);
        let cfg = IntegratorConfig::default();
        let traj = integrate(&f, [0.2, 0.0], 1.0, 4.0, &cfg).unwrap();
        let end = traj.last();
        assert!((end.q[0] - (0.2 + 1.7 * 3.0)).abs() < 1e-10);
        assert_eq!(end.q[1], 0.0);
    }

    #[test]
    fn velocity_matches_phase_differences() {
        let s = reference();
        let f = VelocityField::new(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-6;
        let mut n = 0;
        while n < 50 {
            let q = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let t = rng.gen_range(0.0..6.0);
            let Ok(v) = f.velocity(q, t, 1e-4) else { continue };
            let phase = |q: [f64; 2]| s.eval(q, t).psi.arg();
            let diff = |a: f64, b: f64| {
                let d = a - b;
                (d + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
            };
            let fd = [
                diff(phase([q[0] + h, q[1]]), phase([q[0] - h, q[1]])) / (2.0 * h),
                diff(phase([q[0], q[1] + h]), phase([q[0], q[1] - h])) / (2.0 * h),
            ];
            for k in 0..2 {
                assert!((fd[k] - v[k]).abs() <= 1e-5 * v[k].abs().max(1.0), "q={q:?} {fd:?} {v:?}");
            }
            n += 1;
        }
    }

    fn round_trip_errors(rel_tol: f64, abs_tol: f64, t1: f64) -> Vec<f64> {
        let s = reference();
        let f = VelocityField::new(&s);
        let cfg = IntegratorConfig::default().with_tolerance(rel_tol, abs_tol);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let mut errs = Vec::new();
        while errs.len() < 100 {
            let q0 = [rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)];
            let (q1, st) = endpoint(&f, q0, 0.0, t1, &cfg);
            if st != Status::Completed {
                continue;
            }
            let (back, st) = endpoint(&f, q1, t1, 0.0, &cfg);
            assert_eq!(st, Status::Completed);
            errs.push(((back[0] - q0[0]).powi(2) + (back[1] - q0[1]).powi(2)).sqrt());
        }
        errs
    }

    #[test]
    fn round_trip_returns_to_start() {
        // Trajectories grazing a moving node amplify local error, so at
        // rel_tol = 1e-8 a few percent of starts miss 1e-6 on the way back.
        let errs = round_trip_errors(1e-8, 1e-10, 1.0);
        let over = errs.iter().filter(|&&e| e > 1e-6).count();
        assert!(over <= 5, "{over} of 100 round trips above 1e-6");
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
        let errs = round_trip_errors(1e-11, 1e-13, 1.0);
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }

    #[test]
    fn sampled_output_hits_requested_times() {
        let s = reference();
        let f = VelocityField::new(&s);
        let cfg = IntegratorConfig::default();
        let times: Vec<f64> = (0..=10).map(|k| k as f64 * 0.5).collect();
        let traj = integrate_sampled(&f, [0.5, 0.5], 0.0, &times, &cfg).unwrap();
        assert_eq!(traj.samples.len(), times.len());
        let direct = endpoint(&f, [0.5, 0.5], 0.0, 2.5, &cfg).0;
        let dense = traj.samples[5].q;
        assert!((direct[0] - dense[0]).abs() < 1e-6 && (direct[1] - dense[1]).abs() < 1e-6);
        let backward: Vec<f64> = times.iter().rev().map(|t| t - 5.0).skip(1).collect();
        let traj = integrate_sampled(&f, [0.5, 0.5], 0.0, &backward, &cfg).unwrap();
        assert_eq!(traj.samples.len(), backward.len());
        assert!(traj.samples.windows(2).all(|w| w[1].t < w[0].t));
    }

    #[test]
    fn start_at_node_is_rejected() {
        let s = Superposition::eigenstate(System::UNIT_OSCILLATOR, 1, 0).unwrap();
        let f = VelocityField::new(&s);
        let cfg = IntegratorConfig::default();
        assert!(matches!(
            integrate(&f, [0.0, 0.0], 0.0, 1.0, &cfg),
            Err(Error::NodeProximity { .. })
        ));
        assert_eq!(endpoint(&f, [0.0, 0.0], 0.0, 1.0, &cfg).1, Status::AbortedNode);
        assert!(integrate(&f, [1.0, 0.0], 1.0, 1.0, &cfg).is_err());
    }

    #[test]
    fn flow_map_preserves_order() {
        let s = reference();
        let f = VelocityField::new(&s);
        let cfg = IntegratorConfig::default();
        assert!(flow_map(&f, &[], 0.0, 1.0, &cfg).is_empty());
        let pts = [[0.1, 0.2], [1.0, -1.0], [-0.7, 0.4]];
        let batch = flow_map(&f, &pts, 0.0, 1.0, &cfg);
        for (p, got) in pts.iter().zip(&batch) {
            assert_eq!(*got, endpoint(&f, *p, 0.0, 1.0, &cfg));
        }
    }

    #[test]
    fn mass_scales_velocity() {
        let half = C64::new(0.5f64.sqrt(), 0.0);
        let s = Superposition::new(
            System::UNIT_OSCILLATOR,
            vec![Mode::new(0, 0, half), Mode::new(1, 0, half * C64::i())],
            0.0,
        )
        .unwrap();
        let v1 = VelocityField::new(&s).velocity([0.4, 0.1], 0.3, 1e-12).unwrap();
        let v3 = VelocityField::with_constant_mass(&s, 3.0).velocity([0.4, 0.1], 0.3, 1e-12).unwrap();
        assert!((v1[0] - 3.0 * v3[0]).abs() < 1e-15);
    }

    #[test]
    fn csv_export_has_header() {
        let s = reference();
        let f = VelocityField::new(&s);
        let cfg = IntegratorConfig::default();
        let traj = integrate(&f, [0.5, 0.5], 0.0, 1.0, &cfg).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, &cfg).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        assert_eq!(lines.next(), Some("t,q1,q2,v1,v2"));
        assert_eq!(lines.count(), traj.samples.len());
    }
}
