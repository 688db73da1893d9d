//! Discrete Gaussian smoothing used for response-time plots.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmoothError {
    #[error("EmptySeries")]
    EmptySeries,
    #[error("sigma must be positive and finite")]
    BadSigma,
}

/// Unnormalized kernel weights `exp(-k^2 / 2 sigma^2)` for `k` in `-r..=r`, `r = ceil(3 sigma)`.
pub fn kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect()
}

/// Smooth with radius `ceil(3 sigma)`. Near the ends the kernel is truncated
/// to the samples that exist and renormalized over them.
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Result<Vec<f64>, SmoothError> {
    if series.is_empty() {
        return Err(SmoothError::EmptySeries);
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(SmoothError::BadSigma);
    }
    let w = kernel(sigma);
    let r = (w.len() / 2) as i64;
    let n = series.len() as i64;
    Ok((0..n)
        .map(|i| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for k in -r..=r {
                let j = i + k;
                if (0..n).contains(&j) {
                    let wk = w[(k + r) as usize];
                    acc += wk * series[j as usize];
                    norm += wk;
                }
            }
            acc / norm
        })
        .collect())
}
