//! Sample-based calibration metrics.
//!
//! All metrics consume one [`SamplePack`] per predicted event plus the true
//! inter-arrival gap (and type). Times are gaps in original units.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty sample pack at event {0}")]
    EmptyPack(usize),
    #[error("no events to evaluate")]
    NoEvents,
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("quantile level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("quantile levels must be strictly increasing")]
    UnorderedLevels,
    #[error("sample pack at event {0} has no types")]
    MissingTypes(usize),
}

/// U sampled (gap, type) pairs for one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePack {
    pub times: Vec<f64>,
    pub types: Vec<usize>,
}

impl SamplePack {
    pub fn new(times: Vec<f64>, types: Vec<usize>) -> Self {
        Self { times, types }
    }

    pub fn times_only(times: Vec<f64>) -> Self {
        Self { times, types: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Ordered quantile levels.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self, MetricError> {
        if let Some(&q) = levels.iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
            return Err(MetricError::BadLevel(q));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricError::UnorderedLevels);
        }
        if levels.is_empty() {
            return Err(MetricError::NoEvents);
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

impl Default for QuantileGrid {
    /// 0.50, 0.55, ..., 0.95.
    fn default() -> Self {
        Self {
            levels: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }
}

fn nearest_rank(len: usize, q: f64) -> usize {
    // the epsilon keeps q*U at exact integers from rounding up
    let rank = (q * len as f64 - 1e-9).ceil() as usize;
    rank.clamp(1, len) - 1
}

/// Nearest-rank quantile: the `ceil(qU)`-th order statistic.
pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::EmptyPack(0));
    }
    if !(q > 0.0 && q < 1.0) && q != 1.0 {
        return Err(MetricError::BadLevel(q));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), q)])
}

fn check_packs(truths: usize, packs: &[SamplePack]) -> Result<(), MetricError> {
    if packs.is_empty() {
        return Err(MetricError::NoEvents);
    }
    if truths != packs.len() {
        return Err(MetricError::LengthMismatch {
            what: "truths",
            expected: packs.len(),
            got: truths,
        });
    }
    if let Some(i) = packs.iter().position(SamplePack::is_empty) {
        return Err(MetricError::EmptyPack(i));
    }
    Ok(())
}

fn sorted_times(packs: &[SamplePack]) -> Vec<Vec<f64>> {
    packs
        .iter()
        .map(|p| {
            let mut s = p.times.clone();
            s.sort_by(f64::total_cmp);
            s
        })
        .collect()
}

fn coverage_sorted(truths: &[f64], sorted: &[Vec<f64>], q: f64) -> f64 {
    let inside = truths
        .iter()
        .zip(sorted)
        .filter(|(t, s)| **t < s[nearest_rank(s.len(), q)])
        .count();
    inside as f64 / truths.len() as f64
}

fn interval_length_sorted(sorted: &[Vec<f64>], q: f64) -> f64 {
    sorted.iter().map(|s| s[nearest_rank(s.len(), q)]).sum::<f64>() / sorted.len() as f64
}

/// Fraction of events whose truth lies strictly below the per-event q-quantile.
pub fn coverage(truths: &[f64], packs: &[SamplePack], q: f64) -> Result<f64, MetricError> {
    check_packs(truths.len(), packs)?;
    Ok(coverage_sorted(truths, &sorted_times(packs), q))
}

/// `100 · RMSE` between coverage and level over the grid.
pub fn calibration_score(truths: &[f64], packs: &[SamplePack], grid: &QuantileGrid) -> Result<f64, MetricError> {
    check_packs(truths.len(), packs)?;
    let sorted = sorted_times(packs);
    let coverages: Vec<f64> = grid
        .levels()
        .iter()
        .map(|&q| coverage_sorted(truths, &sorted, q))
        .collect();
    Ok(cs_from_coverages(&coverages, grid.levels()))
}

/// `100 · sqrt(mean (c_s - q_s)^2)`.
pub fn cs_from_coverages(coverages: &[f64], levels: &[f64]) -> f64 {
    let mse = coverages
        .iter()
        .zip(levels)
        .map(|(c, q)| (c - q).powi(2))
        .sum::<f64>()
        / levels.len() as f64;
    100.0 * mse.sqrt()
}

/// Empirical CRPS of one pack by the double sum.
pub fn crps_single(truth: f64, samples: &[f64]) -> f64 {
    let u = samples.len() as f64;
    let spread: f64 = samples.iter().map(|s| (s - truth).abs()).sum::<f64>() / u;
    let mut pair = 0.0;
    for a in samples {
        for b in samples {
            pair += (a - b).abs();
        }
    }
    (spread - pair / (2.0 * u * u)).max(0.0)
}

/// Mean empirical CRPS over events.
pub fn crps(truths: &[f64], packs: &[SamplePack]) -> Result<f64, MetricError> {
    check_packs(truths.len(), packs)?;
    Ok(truths
        .iter()
        .zip(packs)
        .map(|(t, p)| crps_single(*t, &p.times))
        .sum::<f64>()
        / truths.len() as f64)
}

/// Mean per-event q-quantile, i.e. the mean length of `[0, t^q]`.
pub fn interval_length(packs: &[SamplePack], q: f64) -> Result<f64, MetricError> {
    check_packs(packs.len(), packs)?;
    Ok(interval_length_sorted(&sorted_times(packs), q))
}

/// `|coverage - q|`.
pub fn coverage_error(truths: &[f64], packs: &[SamplePack], q: f64) -> Result<f64, MetricError> {
    Ok((coverage(truths, packs, q)? - q).abs())
}

/// Most frequent type; ties go to the smallest index.
pub fn modal_type(types: &[usize]) -> Option<usize> {
    let max = *types.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &k in types {
        counts[k] += 1;
    }
    let best = *counts.iter().max()?;
    counts.iter().position(|&c| c == best)
}

/// Percentage of events whose modal sampled type equals the truth.
pub fn type_accuracy(true_types: &[usize], packs: &[SamplePack]) -> Result<f64, MetricError> {
    check_packs(true_types.len(), packs)?;
    let mut correct = 0;
    for (i, (k, p)) in true_types.iter().zip(packs).enumerate() {
        let mode = modal_type(&p.types).ok_or(MetricError::MissingTypes(i))?;
        correct += usize::from(mode == *k);
    }
    Ok(100.0 * correct as f64 / packs.len() as f64)
}

/// Per-level row of the report curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub q: f64,
    pub coverage: f64,
    pub interval_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "CS")]
    pub cs: f64,
    #[serde(rename = "CRPS")]
    pub crps: f64,
    /// Coverage error at q = 0.5, in percent.
    #[serde(rename = "CER")]
    pub cer: f64,
    /// Interval length at q = 0.5.
    #[serde(rename = "IL")]
    pub il: f64,
    /// `None` when packs carry no types.
    #[serde(rename = "Acc")]
    pub accuracy: Option<f64>,
    pub events: usize,
    pub samples_per_event: usize,
    pub curves: Vec<LevelRow>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `q,coverage,interval_length` rows with a header.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("q,coverage,interval_length\n");
        for r in &self.curves {
            let _ = writeln!(out, "{},{},{}", r.q, r.coverage, r.interval_length);
        }
        out
    }
}

/// Computes every metric in one pass over sorted packs.
pub fn evaluate(
    true_gaps: &[f64],
    true_types: &[usize],
    packs: &[SamplePack],
    grid: &QuantileGrid,
) -> Result<MetricReport, MetricError> {
    check_packs(true_gaps.len(), packs)?;
    let sorted = sorted_times(packs);
    let curves: Vec<LevelRow> = grid
        .levels()
        .iter()
        .map(|&q| LevelRow {
            q,
            coverage: coverage_sorted(true_gaps, &sorted, q),
            interval_length: interval_length_sorted(&sorted, q),
        })
        .collect();
    let coverages: Vec<f64> = curves.iter().map(|r| r.coverage).collect();
    let half_cov = coverage_sorted(true_gaps, &sorted, 0.5);
    let with_types = packs.iter().all(|p| !p.types.is_empty());
    let accuracy = if with_types {
        Some(type_accuracy(true_types, packs)?)
    } else {
        None
    };
    Ok(MetricReport {
        cs: cs_from_coverages(&coverages, grid.levels()),
        crps: crps(true_gaps, packs)?,
        cer: 100.0 * (half_cov - 0.5).abs(),
        il: interval_length_sorted(&sorted, 0.5),
        accuracy,
        events: packs.len(),
        samples_per_event: packs.iter().map(SamplePack::len).max().unwrap_or(0),
        curves,
    })
}
