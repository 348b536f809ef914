//! Small statistics toolkit: rank correlation, isotonic regression, line fits,
//! and the goodness-of-fit and proportion tests used by the experiments.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{invalid, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("rank correlation needs two equal-length samples of size >= 2"));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

/// Least-squares non-decreasing fit (pool adjacent violators), equal weights.
pub fn isotonic_increasing(y: &[f64]) -> Vec<f64> {
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let n = blocks.len();
            let (s1, c1) = blocks[n - 2];
            let (s2, c2) = blocks[n - 1];
            if s1 / c1 as f64 <= s2 / c2 as f64 {
                break;
            }
            blocks.truncate(n - 2);
            blocks.push((s1 + s2, c1 + c2));
        }
    }
    blocks.into_iter().flat_map(|(s, c)| std::iter::repeat(s / c as f64).take(c)).collect()
}

/// Largest deviation from the isotonic fit relative to that fit's value.
pub fn isotonic_residual(y: &[f64]) -> f64 {
    let fit = isotonic_increasing(y);
    y.iter()
        .zip(&fit)
        .map(|(v, f)| (v - f).abs() / f.abs().max(1e-300))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_err: f64,
    pub r_squared: f64,
}

/// Ordinary least-squares line `y = slope x + intercept`.
pub fn line_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("line fit needs two equal-length samples of size >= 2"));
    }
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("line fit needs distinct abscissae"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let tss: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope_err = if n > 2.0 { (rss / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    Ok(LineFit { slope, intercept, slope_err, r_squared })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Two-sided normal-equivalent significance of `p_value`.
    pub sigma: f64,
}

/// Pearson chi-square goodness of fit of `counts` against `probs`.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> Result<ChiSquare> {
    if counts.len() != probs.len() || counts.len() < 2 {
        return Err(invalid("chi-square needs matching counts and probabilities (>= 2 bins)"));
    }
    let total: u64 = counts.iter().sum();
    let psum: f64 = probs.iter().sum();
    if total == 0 || (psum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| !(p > 0.0)) {
        return Err(invalid("chi-square needs a non-empty sample and positive probabilities summing to 1"));
    }
    let statistic: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = p * total as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dof = counts.len() - 1;
    let dist = ChiSquared::new(dof as f64).expect("positive dof");
    let p_value = dist.sf(statistic);
    Ok(ChiSquare { statistic, dof, p_value, sigma: sigma_of_p(p_value) })
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Two-sided p-value of a standard normal score.
pub fn two_sided_p(z: f64) -> f64 {
    2.0 * std_normal().sf(z.abs())
}

/// `|z|` whose two-sided p-value is `p`; saturates at 40 for `p = 0`.
pub fn sigma_of_p(p: f64) -> f64 {
    if p <= 0.0 {
        return 40.0;
    }
    std_normal().inverse_cdf(1.0 - p / 2.0).min(40.0)
}

/// `z` for the difference of two independent proportions (pooled variance).
pub fn two_proportion_z(x1: u64, n1: u64, x2: u64, n2: u64) -> f64 {
    let (p1, p2) = (x1 as f64 / n1 as f64, x2 as f64 / n2 as f64);
    let pool = (x1 + x2) as f64 / (n1 + n2) as f64;
    let se = (pool * (1.0 - pool) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return if p1 == p2 { 0.0 } else { f64::INFINITY.copysign(p1 - p2) };
    }
    (p1 - p2) / se
}

/// McNemar `z = (b - c) / sqrt(b + c)` for paired discordant counts; 0 when both are 0.
pub fn mcnemar_z(b: u64, c: u64) -> f64 {
    if b + c == 0 {
        0.0
    } else {
        (b as f64 - c as f64) / ((b + c) as f64).sqrt()
    }
}
