//! Seasonal ESD: remove a robustly fitted seasonal component and the median
//! level, then run the generalized extreme studentized deviate test on what
//! is left.
//!
//! The seasonal component is a low-order harmonic fit (period `period`)
//! estimated with bisquare-weighted least squares. Fitting a few harmonics
//! instead of a free per-phase profile keeps a single spike from leaking
//! into the same phase of other cycles when only two cycles are available.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{median, AnomalyError};

pub const DEFAULT_HARMONICS: usize = 3;
const BISQUARE_C: f64 = 4.685;
const IRLS_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct EsdParams {
    /// Seasonal period in samples.
    pub period: usize,
    /// Significance level of the generalized ESD test.
    pub alpha: f64,
    /// Upper bound on the number of reported outliers.
    pub max_anomalies: usize,
    /// `None` subtracts the global median; `Some(w)` a running median over
    /// `w` neighbouring samples, for series with a slow daily shape.
    pub median_window: Option<usize>,
    pub harmonics: usize,
}

impl EsdParams {
    pub fn new(period: usize, alpha: f64, max_anomalies: usize) -> Self {
        EsdParams {
            period,
            alpha,
            max_anomalies,
            median_window: None,
            harmonics: DEFAULT_HARMONICS,
        }
    }
}

/// Outlier indices of `x` (sorted ascending).
pub fn seasonal_esd(
    x: &[f64],
    period: usize,
    alpha: f64,
    k_max: usize,
) -> Result<Vec<usize>, AnomalyError> {
    let positions: Vec<usize> = (0..x.len()).collect();
    seasonal_esd_at(&positions, x, &EsdParams::new(period, alpha, k_max))
}

/// Seasonal ESD over samples observed at arbitrary slot `positions`
/// (strictly increasing). Returned indices point into `values`.
pub fn seasonal_esd_at(
    positions: &[usize],
    values: &[f64],
    params: &EsdParams,
) -> Result<Vec<usize>, AnomalyError> {
    assert_eq!(positions.len(), values.len(), "one position per value");
    if params.period == 0 {
        return Err(AnomalyError::InvalidParameter("period must be positive".into()));
    }
    if !(params.alpha > 0.0 && params.alpha < 1.0) {
        return Err(AnomalyError::InvalidParameter(format!("alpha {} outside (0, 1)", params.alpha)));
    }
    if params.max_anomalies == 0 {
        return Err(AnomalyError::InvalidParameter("max_anomalies must be at least 1".into()));
    }
    if values.len() < 2 * params.period {
        return Err(AnomalyError::SeriesTooShort {
            needed: 2 * params.period,
            got: values.len(),
        });
    }
    let residual = seasonal_residual(positions, values, params);
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut found = generalized_esd_scaled(&residual, params.alpha, params.max_anomalies, scale);
    found.sort_unstable();
    Ok(found)
}

/// `x - seasonal - level` with the level taken as a (running) median.
pub fn seasonal_residual(positions: &[usize], values: &[f64], params: &EsdParams) -> Vec<f64> {
    let seasonal = robust_seasonal(positions, values, params.period, params.harmonics);
    let deseasoned: Vec<f64> = values.iter().zip(&seasonal).map(|(v, s)| v - s).collect();
    match params.median_window {
        Some(w) if w < deseasoned.len() => {
            let level = running_median(&deseasoned, w.max(1));
            deseasoned.iter().zip(&level).map(|(d, l)| d - l).collect()
        }
        _ => {
            let level = median(&deseasoned);
            deseasoned.iter().map(|d| d - level).collect()
        }
    }
}

fn harmonic_columns(period: usize, harmonics: usize) -> Vec<(usize, bool)> {
    let max_h = harmonics.min(period / 2);
    let mut cols = Vec::new();
    for h in 1..=max_h {
        cols.push((h, false));
        if 2 * h != period {
            cols.push((h, true));
        }
    }
    cols
}

/// Zero-mean periodic component fitted by iteratively reweighted least
/// squares with Tukey bisquare weights.
fn robust_seasonal(positions: &[usize], values: &[f64], period: usize, harmonics: usize) -> Vec<f64> {
    let cols = harmonic_columns(period, harmonics);
    if cols.is_empty() {
        return vec![0.0; values.len()];
    }
    let n = values.len();
    let p = cols.len() + 1;
    let design = DMatrix::from_fn(n, p, |row, col| {
        if col == 0 {
            return 1.0;
        }
        let (h, is_sin) = cols[col - 1];
        let angle = 2.0 * std::f64::consts::PI * (h * (positions[row] % period)) as f64 / period as f64;
        if is_sin {
            angle.sin()
        } else {
            angle.cos()
        }
    });
    let y = DVector::from_column_slice(values);
    let tiny = 1e-12 * values.iter().fold(1.0f64, |m, v| m.max(v.abs()));

    let mut weights = vec![1.0; n];
    let mut beta = DVector::zeros(p);
    for iter in 0..IRLS_MAX_ITER {
        let Some(next) = weighted_least_squares(&design, &y, &weights) else { break };
        let change = (&next - &beta).amax();
        beta = next;
        if iter > 0 && change <= tiny {
            break;
        }
        let fitted = &design * &beta;
        let resid: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
        let abs: Vec<f64> = resid.iter().map(|r| r.abs()).collect();
        let spread = 1.4826 * median(&abs);
        for (w, r) in weights.iter_mut().zip(&resid) {
            *w = if spread <= tiny {
                if r.abs() <= tiny * 1e3 {
                    1.0
                } else {
                    0.0
                }
            } else {
                let u = r / (BISQUARE_C * spread);
                if u.abs() < 1.0 {
                    (1.0 - u * u).powi(2)
                } else {
                    0.0
                }
            };
        }
    }

    (0..n)
        .map(|row| (1..p).map(|col| design[(row, col)] * beta[col]).sum())
        .collect()
}

fn weighted_least_squares(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Option<DVector<f64>> {
    let mut xtwx = DMatrix::zeros(x.ncols(), x.ncols());
    let mut xtwy = DVector::zeros(x.ncols());
    for (row, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let xi = x.row(row);
        xtwx += wi * xi.transpose() * xi;
        xtwy += wi * y[row] * xi.transpose();
    }
    xtwx.svd(true, true).solve(&xtwy, 1e-12).ok()
}

/// Centred running median; the window shrinks symmetrically at the ends.
fn running_median(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let half = (window / 2).min(i).min(n - 1 - i);
            median(&x[i - half..=i + half])
        })
        .collect()
}

/// Rosner's generalized ESD test. Returns the indices flagged as outliers
/// in removal order.
pub fn generalized_esd(x: &[f64], alpha: f64, k_max: usize) -> Vec<usize> {
    let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    generalized_esd_scaled(x, alpha, k_max, scale)
}

pub(crate) fn generalized_esd_scaled(x: &[f64], alpha: f64, k_max: usize, scale: f64) -> Vec<usize> {
    let n = x.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut removed = Vec::new();
    let mut outliers = 0;
    let k_max = k_max.min(n.saturating_sub(3));
    for i in 1..=k_max {
        let count = remaining.len() as f64;
        let mean = remaining.iter().map(|&j| x[j]).sum::<f64>() / count;
        let var = remaining.iter().map(|&j| (x[j] - mean).powi(2)).sum::<f64>() / (count - 1.0);
        let sd = var.sqrt();
        // residuals at rounding-noise level carry no outliers
        if sd <= 1e-9 * scale {
            break;
        }
        let (pos, &worst) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let da = (x[*a.1] - mean).abs();
                let db = (x[*b.1] - mean).abs();
                da.total_cmp(&db).then(b.0.cmp(&a.0))
            })
            .expect("remaining is non-empty");
        let statistic = (x[worst] - mean).abs() / sd;
        let critical = critical_value(n, i, alpha);
        removed.push(worst);
        remaining.remove(pos);
        if statistic > critical {
            outliers = i;
        }
    }
    removed.truncate(outliers);
    removed
}

fn critical_value(n: usize, i: usize, alpha: f64) -> f64 {
    let n = n as f64;
    let i = i as f64;
    let df = n - i - 1.0;
    let p = 1.0 - alpha / (2.0 * (n - i + 1.0));
    let t = StudentsT::new(0.0, 1.0, df)
        .expect("degrees of freedom are positive")
        .inverse_cdf(p);
    (n - i) * t / ((df + t * t) * (n - i + 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sinusoid(period: usize, cycles: usize, amplitude: f64) -> Vec<f64> {
        (0..period * cycles)
            .map(|i| 100.0 + amplitude * (2.0 * std::f64::consts::PI * i as f64 / period as f64).sin())
            .collect()
    }

    #[test]
    fn clean_sinusoid_has_no_outliers() {
        let x = sinusoid(24, 2, 20.0);
        assert!(seasonal_esd(&x, 24, 0.05, 5).unwrap().is_empty());
    }

    #[test]
    fn single_spike_is_found_at_its_index() {
        let amplitude = 20.0;
        let sigma = amplitude / 2f64.sqrt();
        for j in [0, 5, 17, 30, 47] {
            let mut x = sinusoid(24, 2, amplitude);
            x[j] += 10.0 * sigma;
            assert_eq!(seasonal_esd(&x, 24, 0.05, 5).unwrap(), vec![j], "spike at {j}");
        }
    }

    #[test]
    fn spike_in_noisy_sinusoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = sinusoid(24, 4, 10.0);
        for v in &mut x {
            *v += noise.sample(&mut rng);
        }
        x[40] += 10.0;
        assert_eq!(seasonal_esd(&x, 24, 0.05, 9).unwrap(), vec![40]);
    }

    #[test]
    fn zeroed_window_in_alternating_day() {
        let mut x: Vec<f64> = (0..60).map(|i| if i % 2 == 0 { 30.0 } else { 10.0 }).collect();
        x[24] = 0.0;
        x[25] = 0.0;
        assert_eq!(seasonal_esd(&x, 2, 0.05, 6).unwrap(), vec![24, 25]);
    }

    #[test]
    fn gaps_do_not_break_the_phase() {
        let positions: Vec<usize> = (0..80).filter(|i| !(30..36).contains(i)).collect();
        let mut values: Vec<f64> = positions.iter().map(|&i| if i % 2 == 0 { 30.0 } else { 10.0 }).collect();
        let hit = positions.iter().position(|&p| p == 50).unwrap();
        values[hit] = 0.0;
        let params = EsdParams::new(2, 0.05, 8);
        assert_eq!(seasonal_esd_at(&positions, &values, &params).unwrap(), vec![hit]);
    }

    #[test]
    fn output_is_bounded_by_k_max() {
        let mut x: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 30.0 } else { 10.0 }).collect();
        for i in (0..40).step_by(7) {
            x[i] = 0.0;
        }
        let found = seasonal_esd(&x, 2, 0.05, 3).unwrap();
        assert!(found.len() <= 3);
        assert!(found.iter().all(|&i| i < x.len()));
    }

    #[test]
    fn parameter_checks() {
        assert!(matches!(seasonal_esd(&[1.0; 5], 3, 0.05, 1), Err(AnomalyError::SeriesTooShort { .. })));
        assert!(seasonal_esd(&[1.0; 10], 2, 1.5, 1).is_err());
        assert!(seasonal_esd(&[1.0; 10], 2, 0.05, 0).is_err());
    }

    #[test]
    fn critical_values_match_rosner_table() {
        // Rosner (1983) table entries for alpha = 0.05
        assert!((critical_value(25, 1, 0.05) - 2.82).abs() < 0.01);
        assert!((critical_value(50, 1, 0.05) - 3.13).abs() < 0.01);
        assert!((critical_value(100, 1, 0.05) - 3.38).abs() < 0.01);
    }

    #[test]
    fn gesd_matches_rosner_example() {
        // 54 observations from Rosner (1983); three outliers are expected.
        let x = [
            -0.25, 0.68, 0.94, 1.15, 1.20, 1.26, 1.26, 1.34, 1.38, 1.43, 1.49, 1.49, 1.55, 1.56,
            1.58, 1.65, 1.69, 1.70, 1.76, 1.77, 1.81, 1.91, 1.94, 1.96, 1.99, 2.06, 2.09, 2.10,
            2.14, 2.15, 2.23, 2.24, 2.26, 2.35, 2.37, 2.40, 2.47, 2.54, 2.62, 2.64, 2.90, 2.92,
            2.92, 2.93, 3.21, 3.26, 3.30, 3.59, 3.68, 4.30, 4.64, 5.34, 5.42, 6.01,
        ];
        let mut found = generalized_esd(&x, 0.05, 10);
        found.sort_unstable();
        assert_eq!(found, vec![51, 52, 53]);
    }
}
