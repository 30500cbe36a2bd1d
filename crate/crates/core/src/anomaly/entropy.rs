//! Approximate entropy (regularity statistic).

use super::AnomalyError;

pub const DEFAULT_EMBEDDING: usize = 2;
pub const DEFAULT_TOLERANCE_FACTOR: f64 = 0.2;

/// `ApEn(m, r) = Phi_m(r) - Phi_{m+1}(r)` with self-matches counted and the
/// Chebyshev distance between templates.
pub fn approximate_entropy(x: &[f64], m: usize, r: f64) -> Result<f64, AnomalyError> {
    if x.len() <= m + 1 {
        return Err(AnomalyError::SeriesTooShort {
            needed: m + 2,
            got: x.len(),
        });
    }
    if r.is_nan() || r <= 0.0 {
        return Err(AnomalyError::NonPositiveTolerance(r));
    }
    Ok(phi(x, m, r) - phi(x, m + 1, r))
}

/// ApEn with `m = 2` and `r = 0.2 * sigma` (population standard deviation).
/// A constant series is perfectly regular and scores zero.
pub fn approximate_entropy_default(x: &[f64]) -> Result<f64, AnomalyError> {
    let sigma = super::std_dev(x);
    if x.len() > DEFAULT_EMBEDDING + 1 && sigma == 0.0 {
        return Ok(0.0);
    }
    approximate_entropy(x, DEFAULT_EMBEDDING, DEFAULT_TOLERANCE_FACTOR * sigma)
}

fn phi(x: &[f64], m: usize, r: f64) -> f64 {
    let templates = x.len() - m + 1;
    let mut total = 0.0;
    for i in 0..templates {
        let matches = (0..templates)
            .filter(|&j| (0..m).all(|k| (x[i + k] - x[j + k]).abs() <= r))
            .count();
        // matches >= 1 thanks to the self-match
        total += (matches as f64 / templates as f64).ln();
    }
    total / templates as f64
}
