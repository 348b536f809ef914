//! One-dimensional eigenfunctions and quadrature rules.

use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::PI;

const PI_POW_MINUS_QUARTER: f64 = 0.751_125_544_464_942_5;

/// Normalized Hermite functions `h_n(x) = (2^n n! sqrt(pi))^{-1/2} H_n(x) e^{-x^2/2}`
/// and their first derivatives for `n = 0..values.len()`.
///
/// Uses the three-term recurrence on the normalized functions, which stays
/// finite far beyond the point where `H_n` itself overflows.
pub fn hermite_functions(x: f64, values: &mut [f64], derivs: &mut [f64]) {
    let n = values.len();
    debug_assert_eq!(n, derivs.len());
    if n == 0 {
        return;
    }
    values[0] = PI_POW_MINUS_QUARTER * (-0.5 * x * x).exp();
    if n > 1 {
        values[1] = std::f64::consts::SQRT_2 * x * values[0];
    }
    for k in 1..n.saturating_sub(1) {
        let kf = k as f64;
        values[k + 1] = (2.0 / (kf + 1.0)).sqrt() * x * values[k]
            - (kf / (kf + 1.0)).sqrt() * values[k - 1];
    }
    derivs[0] = -x * values[0];
    for k in 1..n {
        derivs[k] = (2.0 * k as f64).sqrt() * values[k - 1] - x * values[k];
    }
}

/// Sine modes `sqrt(2/pi) sin(n x)` of the box `[0, pi]` for `n = 1..=values.len()`,
/// with first derivatives. Zero outside the box.
pub fn box_modes(x: f64, values: &mut [f64], derivs: &mut [f64]) {
    let n = values.len();
    if !(0.0..=PI).contains(&x) {
        values.iter_mut().for_each(|v| *v = 0.0);
        derivs.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let norm = (2.0 / PI).sqrt();
    let (s1, c1) = x.sin_cos();
    // Chebyshev-style recurrences for sin(kx), cos(kx).
    let (mut s_prev, mut c_prev) = (0.0, 1.0);
    let (mut s, mut c) = (s1, c1);
    for k in 0..n {
        let kf = (k + 1) as f64;
        values[k] = norm * s;
        derivs[k] = norm * kf * c;
        let s_next = 2.0 * c1 * s - s_prev;
        let c_next = 2.0 * c1 * c - c_prev;
        s_prev = s;
        c_prev = c;
        s = s_next;
        c = c_next;
    }
}

/// Gauss–Hermite rule for the weight `e^{-x^2}` via the Golub–Welsch eigenproblem.
/// Returns `(nodes, weights)` with nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "need at least one node");
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = b;
        jacobi[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}
