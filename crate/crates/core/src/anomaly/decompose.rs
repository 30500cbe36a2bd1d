//! Classical multiplicative decomposition `x = trend * seasonal * residual`.

use super::AnomalyError;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Centered moving average; `None` within half a period of either end.
    pub trend: Vec<Option<f64>>,
    /// One factor per sample, periodic, with mean 1 over a period.
    pub seasonal: Vec<f64>,
    /// `x / (trend * seasonal)` wherever the trend is defined.
    pub residual: Vec<Option<f64>>,
    pub period: usize,
}

pub fn multiplicative_decompose(x: &[f64], period: usize) -> Result<Decomposition, AnomalyError> {
    if period == 0 {
        return Err(AnomalyError::InvalidParameter("period must be positive".into()));
    }
    if x.len() < 2 * period {
        return Err(AnomalyError::SeriesTooShort {
            needed: 2 * period,
            got: x.len(),
        });
    }
    if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(AnomalyError::NonPositiveValue { index, value });
    }

    let trend = centered_moving_average(x, period);

    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for (i, t) in trend.iter().enumerate() {
        if let Some(t) = t {
            sums[i % period] += x[i] / t;
            counts[i % period] += 1;
        }
    }
    let mut factors: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 1.0 })
        .collect();
    let mean = factors.iter().sum::<f64>() / period as f64;
    for f in &mut factors {
        *f /= mean;
    }

    let seasonal: Vec<f64> = (0..x.len()).map(|i| factors[i % period]).collect();
    let residual = trend
        .iter()
        .zip(x.iter().zip(&seasonal))
        .map(|(t, (v, s))| t.map(|t| v / (t * s)))
        .collect();

    Ok(Decomposition {
        trend,
        seasonal,
        residual,
        period,
    })
}

/// Moving average spanning exactly one period, centred on each sample.
/// Even periods use the usual 2 x period average with half-weight ends.
fn centered_moving_average(x: &[f64], period: usize) -> Vec<Option<f64>> {
    let n = x.len();
    let half = period / 2;
    let mut out = vec![None; n];
    for i in half..n.saturating_sub(half) {
        let value = if period % 2 == 1 {
            x[i - half..=i + half].iter().sum::<f64>() / period as f64
        } else {
            let inner: f64 = x[i + 1 - half..i + half].iter().sum();
            (inner + 0.5 * (x[i - half] + x[i + half])) / period as f64
        };
        out[i] = Some(value);
    }
    out
}
