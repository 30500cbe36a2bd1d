//! Seeded synthetic consumption data.

use chrono::{Days, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::store::{DaySeries, StoreError};
use crate::types::{NodeId, Reading, Timestamp, SECONDS_PER_DAY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatternKind {
    /// Cycles through `values`, holding each for `period_samples` samples.
    Alternating {
        values: Vec<f64>,
        #[serde(default = "one")]
        period_samples: usize,
    },
    /// Base load plus Gaussian bumps centred at each peak hour.
    DailyCurve {
        base: f64,
        peaks: Vec<f64>,
        amplitude: f64,
        #[serde(default = "default_width")]
        width_h: f64,
    },
    Constant { value: f64 },
}

fn one() -> usize {
    1
}

fn default_width() -> f64 {
    1.5
}

fn default_interval() -> f64 {
    8.0
}

/// Unknown keys are rejected by the flattened [`PatternKind`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    #[serde(flatten)]
    pub kind: PatternKind,
    #[serde(default = "default_interval")]
    pub sample_interval_s: f64,
    /// Seconds after midnight of the first sample.
    #[serde(default)]
    pub offset_s: f64,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PatternSpec {
    pub fn new(kind: PatternKind) -> Self {
        PatternSpec {
            kind,
            sample_interval_s: default_interval(),
            offset_s: 0.0,
            noise_sd: 0.0,
            seed: 0,
        }
    }

    pub fn alternating(values: Vec<f64>) -> Self {
        PatternSpec::new(PatternKind::Alternating {
            values,
            period_samples: 1,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sample_interval_s > 0.0) {
            return Err(format!("sample_interval_s must be positive, got {}", self.sample_interval_s));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(format!("noise_sd must be non-negative, got {}", self.noise_sd));
        }
        if !(0.0..SECONDS_PER_DAY as f64).contains(&self.offset_s) {
            return Err(format!("offset_s must lie within a day, got {}", self.offset_s));
        }
        match &self.kind {
            PatternKind::Alternating { values, period_samples } if values.is_empty() || *period_samples == 0 => {
                Err("alternating pattern needs values and a positive period".into())
            }
            PatternKind::DailyCurve { width_h, .. } if !(*width_h > 0.0) => Err("width_h must be positive".into()),
            _ => Ok(()),
        }
    }

    /// Second-of-day of every sample slot.
    pub fn slot_seconds(&self) -> impl Iterator<Item = i64> + '_ {
        (0..)
            .map(move |k| (self.offset_s + k as f64 * self.sample_interval_s).floor() as i64)
            .take_while(|&s| s < SECONDS_PER_DAY)
    }

    fn shape(&self, k: usize, second: i64) -> f64 {
        match &self.kind {
            PatternKind::Alternating { values, period_samples } => values[(k / period_samples) % values.len()],
            PatternKind::DailyCurve {
                base,
                peaks,
                amplitude,
                width_h,
            } => {
                let hour = second as f64 / 3600.0;
                let bumps: f64 = peaks
                    .iter()
                    .map(|p| {
                        // circular distance so an evening peak wraps past midnight
                        let d = (hour - p).rem_euclid(24.0);
                        let d = d.min(24.0 - d);
                        (-(d * d) / (2.0 * width_h * width_h)).exp()
                    })
                    .sum();
                base + amplitude * bumps
            }
            PatternKind::Constant { value } => *value,
        }
    }
}

fn day_rng(seed: u64, date: NaiveDate) -> ChaCha8Rng {
    let day = Timestamp::start_of_day(date).unix() / SECONDS_PER_DAY;
    ChaCha8Rng::seed_from_u64(seed ^ (day as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Every sample of `date`. Deterministic in `(spec, date)`.
pub fn generate_day(spec: &PatternSpec, source: NodeId, date: NaiveDate) -> DaySeries {
    let start = Timestamp::start_of_day(date);
    let mut rng = day_rng(spec.seed, date);
    let noise = (spec.noise_sd > 0.0).then(|| Normal::new(0.0, spec.noise_sd).expect("noise_sd is finite"));
    let samples = spec
        .slot_seconds()
        .enumerate()
        .map(|(k, second)| {
            let mut value = spec.shape(k, second);
            if let Some(n) = &noise {
                value += n.sample(&mut rng);
            }
            Reading::new(start.plus_secs(second), value.max(0.0))
        })
        .collect();
    DaySeries::new(source, date, samples)
}

/// Readings with `start <= time < end`, produced one day at a time.
pub fn generate_stream(
    spec: &PatternSpec,
    source: NodeId,
    start: Timestamp,
    end: Timestamp,
) -> Result<impl Iterator<Item = Reading> + '_, StoreError> {
    if start >= end {
        return Err(StoreError::InvalidRange { start, end });
    }
    let first = start.date();
    let last = end.plus_secs(-1).date();
    let days = (last - first).num_days() as u64 + 1;
    Ok((0..days)
        .map(move |d| first + Days::new(d))
        .flat_map(move |date| generate_day(spec, source, date).samples)
        .filter(move |r| r.time >= start && r.time < end))
}
