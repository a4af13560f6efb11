//! Kernel two-sample distance between feature-vector sets.

use crate::error::{Error, Result};

/// Total variation distance between two (padded) histograms: half the L1.
fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().max(b.len());
    let mut acc = 0.0;
    for i in 0..len {
        let x = a.get(i).copied().unwrap_or(0.0);
        let y = b.get(i).copied().unwrap_or(0.0);
        acc += (x - y).abs();
    }
    acc / 2.0
}

fn kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let tv = tv_distance(a, b);
    (-tv * tv / (2.0 * sigma * sigma)).exp()
}

/// Squared maximum mean discrepancy with the Gaussian total-variation kernel,
/// V-statistic form (self-pairs included), clamped at zero.
pub fn mmd(features_a: &[Vec<f64>], features_b: &[Vec<f64>], sigma: f64) -> Result<f64> {
    if features_a.is_empty() || features_b.is_empty() {
        return Err(Error::range("mmd needs two non-empty feature sets"));
    }
    let mean_kernel = |xs: &[Vec<f64>], ys: &[Vec<f64>]| -> f64 {
        let mut acc = 0.0;
        for x in xs {
            for y in ys {
                acc += kernel(x, y, sigma);
            }
        }
        acc / (xs.len() * ys.len()) as f64
    };
    let value = mean_kernel(features_a, features_a) + mean_kernel(features_b, features_b)
        - 2.0 * mean_kernel(features_a, features_b);
    Ok(value.max(0.0))
}
