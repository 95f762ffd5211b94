//! Small deterministic estimators shared by the Monte Carlo modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Sample mean with a percentile bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl Estimate {
    pub fn contains(&self, v: f64) -> bool {
        self.ci_low <= v && v <= self.ci_high
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 500;

/// Fixed-block sum so the result does not depend on the thread count.
pub fn stable_sum(values: &[f64]) -> f64 {
    values.par_chunks(4096).map(|c| c.iter().sum::<f64>()).collect::<Vec<_>>().iter().sum()
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = stable_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = stable_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance with the standard error of the variance estimate.
pub fn variance_with_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let (mean, _) = mean_and_stderr(values);
    let d2: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let d4: Vec<f64> = values.iter().map(|v| (v - mean).powi(4)).collect();
    let m2 = stable_sum(&d2) / n;
    let m4 = stable_sum(&d4) / n;
    let var = m2 * n / (n - 1.0);
    (var, ((m4 - m2 * m2) / n).max(0.0).sqrt())
}

/// Mean, standard error and a 95% percentile bootstrap interval.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64) -> Estimate {
    let n = values.len();
    let (mean, stderr) = mean_and_stderr(values);
    if n <= 1 || resamples == 0 {
        return Estimate { mean, stderr, ci_low: mean, ci_high: mean, n };
    }
    let mut means: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut acc = 0.0;
            for _ in 0..n {
                acc += values[rng.random_range(0..n)];
            }
            acc / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Estimate { mean, stderr, ci_low: q(0.025), ci_high: q(0.975), n }
}

/// Ordinary least squares `y ≈ a·x + b`, returning `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_brackets_the_mean() {
        let v: Vec<f64> = (0..1000).map(|i| (i % 17) as f64).collect();
        let e = bootstrap_mean(&v, 300, 3);
        assert!(e.ci_low < e.mean && e.mean < e.ci_high);
        assert_eq!(e, bootstrap_mean(&v, 300, 3));
    }

    #[test]
    fn exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v - 1.0).collect();
        let (a, b) = linear_fit(&x, &y);
        assert!((a - 0.5).abs() < 1e-15 && (b + 1.0).abs() < 1e-15);
    }
}
