//! Embedded Dormand–Prince 5(4) stepping with continuous (dense) output.
//!
//! The right-hand side may refuse to evaluate (a trajectory came too close to
//! a node of the guiding wave). Such a step is rejected and retried at half
//! the size; once the step would fall below `h_min` the solve stops with
//! [`Status::AbortedNode`]. Integration runs forward or backward depending on
//! the sign of `t1 - t0`.

use serde::{Deserialize, Serialize};

/// Why an integration stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    AbortedNode,
    AbortedSteps,
    /// Stopped by an observer-supplied guard (e.g. scale factor below `a_min`).
    AbortedDomain,
}

impl Status {
    pub fn is_completed(self) -> bool {
        self == Status::Completed
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Completed => "completed",
            Status::AbortedNode => "aborted_node",
            Status::AbortedSteps => "aborted_steps",
            Status::AbortedDomain => "aborted_domain",
        }
    }
}

/// Returned by a right-hand side that cannot be evaluated at the requested state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeHit;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

/// Answer of the per-step observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop(Status),
}

/// One accepted step with its continuous extension on `[t_old, t_old + h]`.
#[derive(Clone, Debug)]
pub struct DenseStep<const N: usize> {
    pub t_old: f64,
    pub h: f64,
    pub y_old: [f64; N],
    pub y_new: [f64; N],
    /// Derivative at the new point.
    pub f_new: [f64; N],
    rcont: [[f64; N]; 4],
}

impl<const N: usize> DenseStep<N> {
    pub fn t_new(&self) -> f64 {
        self.t_old + self.h
    }

    /// Fourth-order interpolant; exact at both step ends.
    pub fn at(&self, t: f64) -> [f64; N] {
        let theta = (t - self.t_old) / self.h;
        let theta1 = 1.0 - theta;
        let mut y = [0.0; N];
        for i in 0..N {
            let [r2, r3, r4, r5] = [self.rcont[0][i], self.rcont[1][i], self.rcont[2][i], self.rcont[3][i]];
            y[i] = self.y_old[i] + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * r5)));
        }
        y
    }

    /// True when `t` lies in the closed step interval.
    pub fn contains(&self, t: f64) -> bool {
        let (a, b) = if self.h > 0.0 { (self.t_old, self.t_new()) } else { (self.t_new(), self.t_old) };
        t >= a && t <= b
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome<const N: usize> {
    pub t: f64,
    pub y: [f64; N],
    pub status: Status,
    pub accepted: usize,
    pub rejected: usize,
}

// Dormand & Prince (1980) tableau with Hairer's dense-output coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn combo<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for i in 0..N {
        let mut s = 0.0;
        for (c, k) in terms {
            s += c * k[i];
        }
        out[i] += h * s;
    }
    out
}

/// Integrates `dy/dt = rhs(t, y)` from `t0` to `t1`, calling `observe` after
/// every accepted step.
pub fn solve<const N: usize, F, G>(
    mut rhs: F,
    y0: [f64; N],
    t0: f64,
    t1: f64,
    ctl: &StepControl,
    mut observe: G,
) -> Outcome<N>
where
    F: FnMut(f64, &[f64; N]) -> Result<[f64; N], NodeHit>,
    G: FnMut(&DenseStep<N>) -> Flow,
{
    let mut out = Outcome { t: t0, y: y0, status: Status::Completed, accepted: 0, rejected: 0 };
    if t1 == t0 {
        return out;
    }
    let dir = (t1 - t0).signum();
    let mut f = match rhs(t0, &y0) {
        Ok(f) => f,
        Err(NodeHit) => {
            out.status = Status::AbortedNode;
            return out;
        }
    };
    let mut t = t0;
    let mut y = y0;
    let mut h_abs = ctl.h_init.min(ctl.h_max);
    let mut last_rejected = false;
    let span = (t1 - t0).abs();

    loop {
        let remaining = (t1 - t).abs();
        if remaining <= 1e-13 * span.max(t1.abs()).max(1e-300) {
            break;
        }
        if out.accepted + out.rejected >= ctl.max_steps {
            out.status = Status::AbortedSteps;
            break;
        }
        let final_step = h_abs >= remaining;
        let h = dir * if final_step { remaining } else { h_abs };

        let attempt = (|| -> Result<_, NodeHit> {
            let k1 = f;
            let k2 = rhs(t + C2 * h, &combo(&y, h, &[(A21, &k1)]))?;
            let k3 = rhs(t + C3 * h, &combo(&y, h, &[(A31, &k1), (A32, &k2)]))?;
            let k4 = rhs(t + C4 * h, &combo(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]))?;
            let k5 = rhs(
                t + C5 * h,
                &combo(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
            )?;
            let k6 = rhs(
                t + h,
                &combo(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
            )?;
            let y5 = combo(&y, h, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
            let k7 = rhs(t + h, &y5)?;
            Ok((k1, k3, k4, k5, k6, k7, y5))
        })();

        let (k1, k3, k4, k5, k6, k7, y5) = match attempt {
            Ok(v) => v,
            Err(NodeHit) => {
                out.rejected += 1;
                last_rejected = true;
                h_abs = h.abs() * 0.5;
                if h_abs < ctl.h_min {
                    out.status = Status::AbortedNode;
                    break;
                }
                continue;
            }
        };

        let mut err_sq = 0.0;
        for i in 0..N {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = ctl.abs_tol + ctl.rel_tol * y[i].abs().max(y5[i].abs());
            err_sq += (e / sc).powi(2);
        }
        let err = (err_sq / N as f64).sqrt();
        if !err.is_finite() {
            out.rejected += 1;
            last_rejected = true;
            h_abs = h.abs() * 0.2;
            if h_abs < ctl.h_min {
                out.status = Status::AbortedNode;
                break;
            }
            continue;
        }

        if err <= 1.0 {
            let mut rcont = [[0.0; N]; 4];
            for i in 0..N {
                let ydiff = y5[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                rcont[0][i] = ydiff;
                rcont[1][i] = bspl;
                rcont[2][i] = ydiff - h * k7[i] - bspl;
                rcont[3][i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            let step = DenseStep { t_old: t, h, y_old: y, y_new: y5, f_new: k7, rcont };
            t = if final_step { t1 } else { t + h };
            y = y5;
            f = k7;
            out.accepted += 1;
            out.t = t;
            out.y = y;
            if let Flow::Stop(status) = observe(&step) {
                out.status = status;
                return out;
            }
            let mut fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if last_rejected {
                fac = fac.min(1.0);
            }
            last_rejected = false;
            if !final_step {
                h_abs = (h.abs() * fac).min(ctl.h_max);
            }
        } else {
            out.rejected += 1;
            last_rejected = true;
            h_abs = h.abs() * (0.9 * err.powf(-0.2)).max(0.2);
            if h_abs < ctl.h_min {
                out.status = Status::AbortedNode;
                break;
            }
        }
    }
    out.t = t;
    out.y = y;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctl(tol: f64) -> StepControl {
        StepControl { rel_tol: tol, abs_tol: tol, h_init: 1e-2, h_min: 1e-12, h_max: 1.0, max_steps: 100_000 }
    }

    #[test]
    fn harmonic_oscillator_one_period() {
        let out = solve(
            |_t, y: &[f64; 2]| Ok([y[1], -y[0]]),
            [1.0, 0.0],
            0.0,
            2.0 * std::f64::consts::PI,
            &ctl(1e-10),
            |_| Flow::Continue,
        );
        assert_eq!(out.status, Status::Completed);
        assert!((out.y[0] - 1.0).abs() < 1e-8 && out.y[1].abs() < 1e-8);
    }

    #[test]
    fn backward_integration_of_exponential() {
        let out = solve(|_t, y: &[f64; 1]| Ok([y[0]]), [1.0], 0.0, -2.0, &ctl(1e-11), |_| Flow::Continue);
        assert_eq!(out.t, -2.0);
        assert!((out.y[0] - (-2.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn dense_output_tracks_solution() {
        let mut worst: f64 = 0.0;
        solve(
            |_t, y: &[f64; 2]| Ok([y[1], -y[0]]),
            [0.0, 1.0],
            0.0,
            10.0,
            &ctl(1e-10),
            |s| {
                for k in 1..10 {
                    let t = s.t_old + s.h * k as f64 / 10.0;
                    worst = worst.max((s.at(t)[0] - t.sin()).abs());
                }
                Flow::Continue
            },
        );
        assert!(worst < 1e-7, "{worst}");
    }

    #[test]
    fn node_everywhere_aborts() {
        let out = solve(|_t, _y: &[f64; 1]| Err(NodeHit), [0.0], 0.0, 1.0, &ctl(1e-8), |_| Flow::Continue);
        assert_eq!(out.status, Status::AbortedNode);
    }

    #[test]
    fn node_wall_is_approached_then_aborts() {
        // dy/dt = 1 but y >= 0.5 is forbidden.
        let out = solve(
            |_t, y: &[f64; 1]| if y[0] >= 0.5 { Err(NodeHit) } else { Ok([1.0]) },
            [0.0],
            0.0,
            1.0,
            &ctl(1e-8),
            |_| Flow::Continue,
        );
        assert_eq!(out.status, Status::AbortedNode);
        assert!(out.y[0] < 0.5 && out.y[0] > 0.5 - 1e-6);
    }

    #[test]
    fn step_budget_is_enforced() {
        let mut c = ctl(1e-12);
        c.max_steps = 5;
        let out = solve(|_t, y: &[f64; 2]| Ok([y[1], -y[0]]), [1.0, 0.0], 0.0, 100.0, &c, |_| Flow::Continue);
        assert_eq!(out.status, Status::AbortedSteps);
    }

    #[test]
    fn observer_can_stop() {
        let out = solve(
            |_t, _y: &[f64; 1]| Ok([-1.0]),
            [1.0],
            0.0,
            5.0,
            &ctl(1e-8),
            |s| if s.y_new[0] < 0.0 { Flow::Stop(Status::AbortedDomain) } else { Flow::Continue },
        );
        assert_eq!(out.status, Status::AbortedDomain);
    }
}
