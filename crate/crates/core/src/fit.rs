//! Damped Gauss–Newton (Levenberg–Marquardt) least squares and the two
//! model fits used by the relaxation and field-mode studies.

use nalgebra::{DMatrix, SMatrix, SVector, SymmetricEigen};
use serde::Serialize;
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when a step changes the residual sum of squares by less than this fraction.
    pub ftol: f64,
    /// Stop when a step changes every parameter by less than this (relative) amount.
    pub xtol: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 500, ftol: 1e-15, xtol: 1e-14, lambda0: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LmFit<const P: usize> {
    pub params: [f64; P],
    pub rss: f64,
    /// `s^2 (J^T J)^{-1}` with `s^2 = rss / (n - P)`; NaN when singular.
    pub covariance: [[f64; P]; P],
    /// Smallest over largest eigenvalue of the diagonally scaled `J^T J` at the solution.
    pub conditioning: f64,
    pub iterations: usize,
    pub converged: bool,
}

type Mat<const P: usize> = SMatrix<f64, P, P>;
type Vector<const P: usize> = SVector<f64, P>;

fn normal_equations<const P: usize>(
    model: &impl Fn(f64, &[f64; P]) -> (f64, [f64; P]),
    x: &[f64],
    y: &[f64],
    p: &[f64; P],
) -> (Mat<P>, Vector<P>, f64) {
    let mut jtj = Mat::<P>::zeros();
    let mut jtr = Vector::<P>::zeros();
    let mut rss = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let (f, g) = model(xi, p);
        let r = yi - f;
        rss += r * r;
        for a in 0..P {
            jtr[a] += g[a] * r;
            for b in 0..P {
                jtj[(a, b)] += g[a] * g[b];
            }
        }
    }
    (jtj, jtr, rss)
}

fn rss_at<const P: usize>(model: &impl Fn(f64, &[f64; P]) -> (f64, [f64; P]), x: &[f64], y: &[f64], p: &[f64; P]) -> f64 {
    x.iter().zip(y).map(|(&xi, &yi)| (yi - model(xi, p).0).powi(2)).sum()
}

/// Minimizes `sum (y_i - f(x_i; p))^2` from `p0`. `model` returns the value and
/// the gradient with respect to the parameters.
pub fn levenberg_marquardt<const P: usize>(
    model: impl Fn(f64, &[f64; P]) -> (f64, [f64; P]),
    x: &[f64],
    y: &[f64],
    p0: [f64; P],
    opts: &LmOptions,
) -> LmFit<P> {
    let mut p = p0;
    let mut lambda = opts.lambda0;
    let (mut jtj, mut jtr, mut rss) = normal_equations(&model, x, y, &p);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter && rss.is_finite() {
        iterations += 1;
        if rss == 0.0 || jtr.amax() == 0.0 {
            converged = true;
            break;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut damped = jtj;
            for a in 0..P {
                damped[(a, a)] += lambda * jtj[(a, a)].max(1e-300);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&jtr);
            let mut trial = p;
            for a in 0..P {
                trial[a] += delta[a];
            }
            let trial_rss = rss_at(&model, x, y, &trial);
            if trial_rss.is_finite() && trial_rss <= rss {
                let small_step = (0..P).all(|a| delta[a].abs() <= opts.xtol * (p[a].abs() + opts.xtol));
                let small_gain = rss - trial_rss <= opts.ftol * rss;
                p = trial;
                (jtj, jtr, rss) = normal_equations(&model, x, y, &p);
                lambda = (lambda / 10.0).max(1e-15);
                improved = true;
                if small_step || small_gain {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged || !improved {
            // no downhill step at any damping: a (numerically) stationary point
            converged = converged || rss.is_finite();
            break;
        }
    }
    // conditioning of the diagonally scaled matrix, so parameter units do not matter
    let diag: Vec<f64> = (0..P).map(|a| jtj[(a, a)]).collect();
    let conditioning = if diag.iter().any(|&d| !(d > 0.0)) {
        0.0
    } else {
        let scaled = DMatrix::from_fn(P, P, |a, b| jtj[(a, b)] / (diag[a] * diag[b]).sqrt());
        let eig = SymmetricEigen::new(scaled);
        let (lo, hi) = eig.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
        if hi > 0.0 { lo / hi } else { 0.0 }
    };
    let dof = x.len().saturating_sub(P).max(1) as f64;
    let mut covariance = [[f64::NAN; P]; P];
    if conditioning > 1e-14 {
        if let Some(inv) = jtj.try_inverse() {
            let s2 = rss / dof;
            for a in 0..P {
                for b in 0..P {
                    covariance[a][b] = s2 * inv[(a, b)];
                }
            }
        }
    }
    LmFit { params: p, rss, covariance, conditioning, iterations, converged }
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let (l, h) = (lo.ln(), hi.ln());
    (0..n).map(move |i| (l + (h - l) * i as f64 / (n - 1) as f64).exp())
}

fn check_data(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(invalid("abscissa and data lengths differ"));
    }
    if x.len() < min {
        return Err(invalid(format!("need at least {min} points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("fit data must be finite"));
    }
    Ok(())
}

fn r_squared(y: &[f64], rss: f64) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if tss > 0.0 {
        1.0 - rss / tss
    } else if rss == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    }
}

fn is_flat(y: &[f64]) -> bool {
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1e-300)
}

/// `a exp(-b t / 2 pi) + c`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Parameter order `(a, b, c)`.
    pub covariance: [[f64; 3]; 3],
    pub rss: f64,
    pub r_squared: f64,
    /// The decay rate is not identifiable (flat data or singular normal matrix).
    pub degenerate: bool,
}

impl ExpFit {
    /// `e`-folding time `2 pi / b`.
    pub fn tau(&self) -> f64 {
        2.0 * PI / self.b
    }

    /// One-sigma uncertainty of `tau` from the covariance of `b`.
    pub fn tau_err(&self) -> f64 {
        2.0 * PI * self.covariance[1][1].sqrt() / (self.b * self.b)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.a * (-self.b * t / (2.0 * PI)).exp() + self.c
    }
}

fn exp_model(t: f64, p: &[f64; 3]) -> (f64, [f64; 3]) {
    let s = t / (2.0 * PI);
    let e = (-p[1] * s).exp();
    (p[0] * e + p[2], [e, -p[0] * s * e, 1.0])
}

/// Linear least squares for `(a, c)` in `a u + c` with `u` fixed.
fn linear_ac(u: &[f64], y: &[f64]) -> (f64, f64) {
    let n = u.len() as f64;
    let (su, sy) = (u.iter().sum::<f64>(), y.iter().sum::<f64>());
    let suu: f64 = u.iter().map(|v| v * v).sum();
    let suy: f64 = u.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * suu - su * su;
    if det.abs() <= 1e-300 {
        return (0.0, sy / n);
    }
    let a = (n * suy - su * sy) / det;
    (a, (sy - a * su) / n)
}

/// Fits `a exp(-b t / 2 pi) + c` with a multi-start over `b`.
pub fn fit_exponential(t: &[f64], y: &[f64]) -> Result<ExpFit> {
    check_data(t, y, 5)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    if is_flat(y) {
        return Ok(ExpFit {
            a: 0.0,
            b: f64::NAN,
            c: mean,
            covariance: [[f64::NAN; 3]; 3],
            rss: y.iter().map(|v| (v - mean).powi(2)).sum(),
            r_squared: 1.0,
            degenerate: true,
        });
    }
    let span = (t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min)).max(1e-300);
    // b in periods^-1: from one e-fold over 100 spans up to 100 e-folds per sample spacing
    let periods = span / (2.0 * PI);
    let (b_lo, b_hi) = (0.01 / periods, 100.0 * t.len() as f64 / periods);
    let opts = LmOptions::default();
    let mut best: Option<LmFit<3>> = None;
    for b0 in log_spaced(b_lo, b_hi, 12) {
        let u: Vec<f64> = t.iter().map(|&ti| (-b0 * ti / (2.0 * PI)).exp()).collect();
        let (a0, c0) = linear_ac(&u, y);
        let fit = levenberg_marquardt(exp_model, t, y, [a0, b0, c0], &opts);
        if !(fit.converged && fit.rss.is_finite() && fit.params.iter().all(|v| v.is_finite())) {
            continue;
        }
        if best.as_ref().map_or(true, |b| fit.rss < b.rss) {
            best = Some(fit);
        }
    }
    let fit = best.ok_or_else(|| Error::FitDiverged("exponential decay".into()))?;
    let [a, b, c] = fit.params;
    let degenerate = fit.conditioning <= 1e-14 || a == 0.0;
    Ok(ExpFit { a, b, c, covariance: fit.covariance, rss: fit.rss, r_squared: r_squared(y, fit.rss), degenerate })
}

/// [`fit_exponential`] with the asymptote held at `c >= 0`, as for a relative
/// entropy. Slow decays whose unconstrained optimum has `c < 0` are otherwise
/// lost: those starts run away and only spurious fast fits survive.
pub fn fit_exponential_nonneg(t: &[f64], y: &[f64]) -> Result<ExpFit> {
    let free = fit_exponential(t, y)?;
    if free.degenerate && free.a == 0.0 {
        return Ok(free);
    }
    let span = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min);
    let periods = span.max(1e-300) / (2.0 * PI);
    let (b_lo, b_hi) = (0.01 / periods, 100.0 * t.len() as f64 / periods);
    // profile over b with (a, c) solved exactly under the constraint
    let mut grid_best = (f64::INFINITY, [0.0; 3]);
    for b in log_spaced(b_lo, b_hi, 400) {
        let u: Vec<f64> = t.iter().map(|&ti| (-b * ti / (2.0 * PI)).exp()).collect();
        let (mut a, mut c) = linear_ac(&u, y);
        if c < 0.0 {
            c = 0.0;
            a = u.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / u.iter().map(|v| v * v).sum::<f64>();
        }
        let p = [a, b, c];
        let rss = rss_at(&exp_model, t, y, &p);
        if rss < grid_best.0 {
            grid_best = (rss, p);
        }
    }
    let opts = LmOptions::default();
    let mut best = ExpFit {
        a: grid_best.1[0],
        b: grid_best.1[1],
        c: grid_best.1[2],
        covariance: [[f64::NAN; 3]; 3],
        rss: grid_best.0,
        r_squared: r_squared(y, grid_best.0),
        degenerate: true,
    };
    let interior = levenberg_marquardt(exp_model, t, y, grid_best.1, &opts);
    if interior.converged && interior.params[2] >= 0.0 && interior.rss <= best.rss * (1.0 + 1e-9) {
        let [a, b, c] = interior.params;
        best = ExpFit {
            a,
            b,
            c,
            covariance: interior.covariance,
            rss: interior.rss,
            r_squared: r_squared(y, interior.rss),
            degenerate: interior.conditioning <= 1e-14 || a == 0.0,
        };
    } else {
        let model = |x: f64, p: &[f64; 2]| {
            let (v, g) = exp_model(x, &[p[0], p[1], 0.0]);
            (v, [g[0], g[1]])
        };
        let edge = levenberg_marquardt(model, t, y, [grid_best.1[0], grid_best.1[1]], &opts);
        if edge.converged && edge.params[1] > 0.0 && edge.rss <= best.rss * (1.0 + 1e-9) {
            let cv = edge.covariance;
            best = ExpFit {
                a: edge.params[0],
                b: edge.params[1],
                c: 0.0,
                covariance: [[cv[0][0], cv[0][1], 0.0], [cv[1][0], cv[1][1], 0.0], [0.0, 0.0, 0.0]],
                rss: edge.rss,
                r_squared: r_squared(y, edge.rss),
                degenerate: edge.conditioning <= 1e-14,
            };
        }
    }
    if free.c >= 0.0 && free.rss < best.rss {
        return Ok(free);
    }
    Ok(best)
}

/// `atan(c1 k / pi + c2) - pi / 2 + c3`.
#[derive(Clone, Debug, Serialize)]
pub struct XiFit {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub covariance: [[f64; 3]; 3],
    pub rss: f64,
    pub r_squared: f64,
    /// `xi_i - fit(k_i)`.
    pub residuals: Vec<f64>,
    /// `c1 -> 0`: the curve is flat and `c2`, `c3` are not separately identifiable.
    pub degenerate: bool,
}

impl XiFit {
    pub fn eval(&self, k: f64) -> f64 {
        xi_model(k, &[self.c1, self.c2, self.c3]).0
    }

    /// Limit of the fitted curve as `k -> 0`.
    pub fn small_k_limit(&self) -> f64 {
        self.c3 - FRAC_PI_2 + self.c2.atan()
    }
}

fn xi_model(k: f64, p: &[f64; 3]) -> (f64, [f64; 3]) {
    let z = p[0] * k / PI + p[1];
    let d = 1.0 / (1.0 + z * z);
    (z.atan() - FRAC_PI_2 + p[2], [d * k / PI, d, 1.0])
}

/// Fits the inverse-tangent suppression curve with a multi-start over `(c1, c2)`.
pub fn fit_xi(k: &[f64], xi: &[f64]) -> Result<XiFit> {
    check_data(k, xi, 5)?;
    if k.iter().any(|&v| v <= 0.0) {
        return Err(invalid("wavenumbers must be positive"));
    }
    let kmed = {
        let mut s = k.to_vec();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let opts = LmOptions::default();
    let mut best: Option<LmFit<3>> = None;
    for c1 in log_spaced(1e-2 * PI / kmed, 1e2 * PI / kmed, 9) {
        for c2 in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            // c3 enters linearly
            let c3 = xi
                .iter()
                .zip(k)
                .map(|(&y, &kk)| y - xi_model(kk, &[c1, c2, 0.0]).0)
                .sum::<f64>()
                / k.len() as f64;
            let fit = levenberg_marquardt(xi_model, k, xi, [c1, c2, c3], &opts);
            if !(fit.converged && fit.rss.is_finite() && fit.params.iter().all(|v| v.is_finite())) {
                continue;
            }
            if best.as_ref().map_or(true, |b| fit.rss < b.rss) {
                best = Some(fit);
            }
        }
    }
    let fit = best.ok_or_else(|| Error::FitDiverged("inverse-tangent curve".into()))?;
    let [c1, c2, c3] = fit.params;
    let kmax = k.iter().cloned().fold(0.0, f64::max);
    // flat if the slope term varies by less than 1e-8 across the band
    let swing = (c1 * kmax / PI + c2).atan() - c2.atan();
    let degenerate = is_flat(xi) || swing.abs() < 1e-8 || fit.conditioning <= 1e-14;
    Ok(XiFit {
        c1,
        c2,
        c3,
        covariance: fit.covariance,
        rss: fit.rss,
        r_squared: r_squared(xi, fit.rss),
        residuals: k.iter().zip(xi).map(|(&kk, &y)| y - xi_model(kk, &fit.params).0).collect(),
        degenerate,
    })
}
