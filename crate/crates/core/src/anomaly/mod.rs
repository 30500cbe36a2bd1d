//! Time-series kernels for the local half of the defence flow and the daily
//! detector that combines them against an accumulative baseline.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::DaySeries;
use crate::types::{NodeId, SECONDS_PER_DAY};

pub mod decompose;
pub mod dtw;
pub mod entropy;
pub mod esd;

pub use decompose::{multiplicative_decompose, Decomposition};
pub use dtw::{dtw_exact, fast_dtw, Alignment};
pub use entropy::{approximate_entropy, approximate_entropy_default};
pub use esd::{generalized_esd, seasonal_esd, seasonal_esd_at, EsdParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnomalyError {
    #[error("series is empty")]
    EmptySeries,
    #[error("series too short: need at least {needed} samples, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("tolerance must be positive, got {0}")]
    NonPositiveTolerance(f64),
    #[error("multiplicative model needs positive values; x[{index}] = {value}")]
    NonPositiveValue { index: usize, value: f64 },
    #[error("day aligns to {got} slots, baseline has {expected}")]
    SlotMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Population standard deviation; zero for an empty slice.
pub(crate) fn std_dev(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub(crate) fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

/// Fixed-width buckets over a calendar day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotGrid {
    pub interval_s: f64,
}

impl SlotGrid {
    pub fn new(interval_s: f64) -> Self {
        assert!(interval_s > 0.0, "slot interval must be positive");
        SlotGrid { interval_s }
    }

    pub fn slots_per_day(&self) -> usize {
        (SECONDS_PER_DAY as f64 / self.interval_s).ceil() as usize
    }

    pub fn slot_of(&self, seconds_of_day: u32) -> usize {
        ((seconds_of_day as f64 / self.interval_s).floor() as usize).min(self.slots_per_day() - 1)
    }

    /// Bucket a day. Covers the first through the last observed slot; a slot
    /// with several readings keeps the latest, gaps are interpolated.
    pub fn align(&self, day: &DaySeries) -> AlignedDay {
        if day.is_empty() {
            return AlignedDay::default();
        }
        let slots: Vec<usize> = day.samples.iter().map(|r| self.slot_of(r.time.seconds_of_day())).collect();
        let first = slots[0];
        let last = *slots.last().unwrap();
        let mut raw: Vec<Option<f64>> = vec![None; last - first + 1];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); raw.len()];
        for (idx, (slot, r)) in slots.iter().zip(&day.samples).enumerate() {
            raw[slot - first] = Some(r.value);
            members[slot - first].push(idx);
        }
        let observed: Vec<bool> = raw.iter().map(Option::is_some).collect();
        let values = interpolate(&raw);
        AlignedDay {
            first_slot: first,
            values,
            observed,
            members,
        }
    }
}

fn interpolate(raw: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<(usize, f64)> = raw.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
    let mut out = Vec::with_capacity(raw.len());
    let mut k = 0;
    for i in 0..raw.len() {
        while k + 1 < known.len() && known[k + 1].0 <= i {
            k += 1;
        }
        let (i0, v0) = known[k];
        out.push(match known.get(k + 1) {
            Some(&(i1, v1)) if i > i0 => v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64,
            _ => v0,
        });
    }
    out
}

/// A day projected onto the slot grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignedDay {
    pub first_slot: usize,
    /// One value per slot from `first_slot`, gaps interpolated.
    pub values: Vec<f64>,
    /// `false` where the value was interpolated.
    pub observed: Vec<bool>,
    /// Indices into the source day's samples that fell in each slot.
    pub members: Vec<Vec<usize>>,
}

impl AlignedDay {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The usual consumption pattern: mean value per slot over accepted days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub pattern: Vec<f64>,
    pub count: u32,
}

impl Baseline {
    pub fn empty(grid: &SlotGrid) -> Self {
        Baseline {
            pattern: vec![0.0; grid.slots_per_day()],
            count: 0,
        }
    }
}

/// Fold a clean day into the running per-slot mean. The day must cover
/// every slot of the grid.
pub fn update_baseline(baseline: &Baseline, day: &DaySeries, grid: &SlotGrid) -> Result<Baseline, AnomalyError> {
    let aligned = grid.align(day);
    let expected = baseline.pattern.len();
    if aligned.first_slot != 0 || aligned.len() != expected {
        let got = if aligned.first_slot == 0 { aligned.len() } else { 0 };
        return Err(AnomalyError::SlotMismatch { expected, got });
    }
    let n = baseline.count as f64 + 1.0;
    let pattern = baseline
        .pattern
        .iter()
        .zip(&aligned.values)
        .map(|(p, v)| p + (v - p) / n)
        .collect();
    Ok(Baseline {
        pattern,
        count: baseline.count + 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    FastDtw,
    SeasonalEsd,
    ApproximateEntropy,
    Decomposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub sample_interval_s: f64,
    pub min_baseline_days: u32,
    pub cold_start_esd: bool,
    pub gates: Vec<Gate>,
    pub dtw_radius: usize,
    /// Absolute floor of the per-sample DTW threshold, watts.
    pub dtw_threshold: f64,
    /// Multiple of the trailing mean per-sample distance.
    pub dtw_factor: f64,
    pub dtw_trailing_days: usize,
    /// Per-point alignment cost above which a sample becomes suspicious.
    pub point_threshold: f64,
    pub min_dtw_samples: usize,
    pub esd_period: usize,
    pub esd_alpha: f64,
    pub esd_max_fraction: f64,
    pub esd_median_window: usize,
    pub min_esd_samples: usize,
    pub apen_threshold: f64,
    pub decomposition_tolerance: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            sample_interval_s: 8.0,
            min_baseline_days: 3,
            cold_start_esd: true,
            gates: vec![Gate::FastDtw, Gate::SeasonalEsd],
            dtw_radius: 2,
            dtw_threshold: 5.0,
            dtw_factor: 3.0,
            dtw_trailing_days: 7,
            point_threshold: 100.0,
            min_dtw_samples: 12,
            esd_period: 2,
            esd_alpha: 1e-5,
            esd_max_fraction: 0.10,
            esd_median_window: 15,
            min_esd_samples: 8,
            apen_threshold: 1.0,
            decomposition_tolerance: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> SlotGrid {
        SlotGrid::new(self.sample_interval_s)
    }

    pub fn has(&self, gate: Gate) -> bool {
        self.gates.contains(&gate)
    }

    /// Per-sample DTW threshold given the trailing per-sample distances.
    pub fn threshold(&self, trailing: &[f64]) -> f64 {
        let recent = &trailing[trailing.len().saturating_sub(self.dtw_trailing_days)..];
        if recent.is_empty() {
            return self.dtw_threshold;
        }
        let mean = recent.iter().sum::<f64>() / recent.len() as f64;
        (self.dtw_factor * mean).max(self.dtw_threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub source: NodeId,
    pub date: NaiveDate,
    /// Positions within the analysed day's samples.
    pub suspicious_indices: BTreeSet<usize>,
    /// DTW distance to the baseline divided by the aligned length; `None`
    /// when the DTW gate did not run.
    pub distance: Option<f64>,
    pub threshold: f64,
    pub triggered: bool,
}

/// Analyse one (possibly partial) day.
///
/// `trailing` holds the per-sample distances of previous accepted days.
fn dtw_against<'a>(
    day: &DaySeries,
    baseline: &'a Baseline,
    cfg: &DetectorConfig,
) -> Option<(AlignedDay, &'a [f64], Alignment)> {
    let aligned = cfg.grid().align(day);
    let end = aligned.first_slot + aligned.len();
    if baseline.count == 0 || aligned.len() < cfg.min_dtw_samples || end > baseline.pattern.len() {
        return None;
    }
    let reference = &baseline.pattern[aligned.first_slot..end];
    let al = fast_dtw(&aligned.values, reference, cfg.dtw_radius).ok()?;
    Some((aligned, reference, al))
}

/// Per-sample FastDTW distance of `day` to the baseline pattern, once the
/// baseline holds at least one day.
pub fn baseline_distance(day: &DaySeries, baseline: &Baseline, cfg: &DetectorConfig) -> Option<f64> {
    dtw_against(day, baseline, cfg).map(|(aligned, _, al)| al.distance / aligned.len() as f64)
}

pub fn detect_anomalies(day: &DaySeries, baseline: &Baseline, trailing: &[f64], cfg: &DetectorConfig) -> AnomalyReport {
    let values = day.values();
    let threshold = cfg.threshold(trailing);
    let mut suspicious = BTreeSet::new();
    let mut distance = None;

    let warm = baseline.count >= cfg.min_baseline_days;
    let esd_allowed = cfg.has(Gate::SeasonalEsd) && (warm || cfg.cold_start_esd);
    let k_max = ((cfg.esd_max_fraction * values.len() as f64).ceil() as usize).max(1);
    let grid = cfg.grid();
    let learned = warm && baseline.pattern.len() == grid.slots_per_day();
    if esd_allowed && learned && values.len() >= cfg.min_esd_samples {
        // the learned day shape is the seasonal component
        let deviation: Vec<f64> = day
            .samples
            .iter()
            .map(|r| r.value - baseline.pattern[grid.slot_of(r.time.seconds_of_day())])
            .collect();
        let level = median(&deviation);
        let residual: Vec<f64> = deviation.iter().map(|d| d - level).collect();
        let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        suspicious.extend(esd::generalized_esd_scaled(&residual, cfg.esd_alpha, k_max, scale));
    } else if esd_allowed && values.len() >= cfg.min_esd_samples.max(2 * cfg.esd_period) {
        let params = EsdParams {
            median_window: Some(cfg.esd_median_window),
            ..EsdParams::new(cfg.esd_period, cfg.esd_alpha, k_max)
        };
        let positions: Vec<usize> = (0..values.len()).collect();
        if let Ok(found) = seasonal_esd_at(&positions, &values, &params) {
            suspicious.extend(found);
        }
    }

    if warm && cfg.has(Gate::FastDtw) {
        if let Some((aligned, reference, al)) = dtw_against(day, baseline, cfg) {
            let per_sample = al.distance / aligned.len() as f64;
            distance = Some(per_sample);
            if per_sample > threshold {
                for &(i, j) in &al.path {
                    if aligned.observed[i] && (aligned.values[i] - reference[j]).abs() > cfg.point_threshold {
                        suspicious.extend(aligned.members[i].iter().copied());
                    }
                }
            }
        }
    }

    if cfg.has(Gate::ApproximateEntropy) && values.len() > entropy::DEFAULT_EMBEDDING + 1 {
        if let Ok(apen) = approximate_entropy_default(&values) {
            if apen > cfg.apen_threshold {
                suspicious.extend(0..values.len());
            }
        }
    }

    if cfg.has(Gate::Decomposition) && values.len() >= 2 * cfg.esd_period {
        let nonpositive: Vec<usize> = (0..values.len()).filter(|&i| values[i] <= 0.0).collect();
        if nonpositive.is_empty() {
            if let Ok(d) = multiplicative_decompose(&values, cfg.esd_period) {
                for (i, r) in d.residual.iter().enumerate() {
                    if matches!(r, Some(r) if (r - 1.0).abs() > cfg.decomposition_tolerance) {
                        suspicious.insert(i);
                    }
                }
            }
        } else {
            suspicious.extend(nonpositive);
        }
    }

    let triggered = !suspicious.is_empty() || distance.is_some_and(|d| d > threshold);
    AnomalyReport {
        source: day.source,
        date: day.date,
        suspicious_indices: suspicious,
        distance,
        threshold,
        triggered,
    }
}
