//! Normality test and power-law fits used to turn asymptotic claims into
//! finite-sample checks.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Critical values of the Anderson–Darling statistic for a fully specified
/// null distribution, as `(level, value)`.
pub const AD_CRITICAL: [(f64, f64); 4] = [(0.10, 1.933), (0.05, 2.492), (0.025, 3.070), (0.01, 3.857)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormalityTest {
    pub n: usize,
    pub statistic: f64,
    pub p_value: f64,
}

impl NormalityTest {
    /// Table decision at one of the levels in [`AD_CRITICAL`].
    pub fn rejects_at(&self, level: f64) -> Option<bool> {
        AD_CRITICAL.iter().find(|(l, _)| (l - level).abs() < 1e-12).map(|&(_, c)| self.statistic > c)
    }
}

/// Asymptotic upper-tail probability of the Anderson–Darling statistic
/// (Marsaglia & Marsaglia, 2004).
pub fn ad_p_value(z: f64) -> f64 {
    if z <= 0.0 {
        return 1.0;
    }
    let cdf = if z < 2.0 {
        (-1.233_714_1 / z).exp() / z.sqrt()
            * (2.000_12
                + (0.247_105 - (0.064_982_1 - (0.034_796_2 - (0.011_672 - 0.001_686_91 * z) * z) * z) * z) * z)
    } else {
        (-(1.0776 - (2.30695 - (0.43424 - (0.082433 - (0.008056 - 0.0003146 * z) * z) * z) * z) * z).exp()).exp()
    };
    (1.0 - cdf).clamp(0.0, 1.0)
}

/// Anderson–Darling test of `samples / √target_var` against N(0, 1).
pub fn normality_check(samples: &[f64], target_var: f64) -> Result<NormalityTest> {
    let n = samples.len();
    if n < 100 {
        return Err(Error::input(format!("normality check needs at least 100 samples, got {n}")));
    }
    if !(target_var > 0.0 && target_var.is_finite()) {
        return Err(Error::input(format!("target variance {target_var} must be positive")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("normality check got non-finite samples"));
    }
    let first = samples[0];
    if samples.iter().all(|&v| v == first) {
        return Err(Error::input("normality check got degenerate (constant) samples"));
    }
    let scale = target_var.sqrt();
    let mut z: Vec<f64> = samples.iter().map(|v| v / scale).collect();
    z.sort_by(f64::total_cmp);
    let std = Normal::standard();
    let nf = n as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let lo = std.cdf(z[i]).ln();
        let hi = std.cdf(-z[n - 1 - i]).ln();
        sum += (2 * i + 1) as f64 * (lo + hi);
    }
    let statistic = -nf - sum / nf;
    Ok(NormalityTest { n, statistic, p_value: ad_p_value(statistic) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Least-squares slope of `ln mse` against `ln x_scale`.
pub fn rate_fit(x_scale: &[f64], mse: &[f64]) -> Result<RateFit> {
    let n = x_scale.len();
    if n != mse.len() {
        return Err(Error::input("rate fit needs equally long inputs"));
    }
    if n < 3 {
        return Err(Error::input(format!("rate fit needs at least 3 points, got {n}")));
    }
    if x_scale.iter().chain(mse).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::input("rate fit needs positive finite inputs"));
    }
    let lx: Vec<f64> = x_scale.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = mse.iter().map(|v| v.ln()).collect();
    let nf = n as f64;
    let mx = lx.iter().sum::<f64>() / nf;
    let my = ly.iter().sum::<f64>() / nf;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::input("rate fit needs at least two distinct scales"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (rss / (nf - 2.0) / sxx).sqrt();
    Ok(RateFit { slope, intercept, stderr, n })
}

/// Mean, unbiased variance and standard error of the mean.
pub fn mean_var(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var, (var / n).sqrt())
}
