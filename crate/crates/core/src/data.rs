//! Marked event sequences: parsing, validation, gap normalization, splitting and
//! corpus statistics.
//!
//! Sequence files are line-delimited JSON, one sequence per line:
//!
//! ```text
//! {"events":[{"t":0.5,"k":0},{"t":1.25,"k":2}],"num_types":3}
//! ```
//!
//! `num_types` is optional; the dataset's type count is the largest declared
//! value or `max(k) + 1`, whichever is larger.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Zero gaps are floored to this value before taking logs.
pub const GAP_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: non-monotone timestamps at event {index}")]
    NonMonotone { line: usize, index: usize },
    #[error("line {line}: negative or non-finite time at event {index}")]
    BadTime { line: usize, index: usize },
    #[error("line {line}: type index {k} >= declared number of types {num_types}")]
    TypeOutOfRange {
        line: usize,
        k: usize,
        num_types: usize,
    },
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("zero variance: normalizer cannot be fitted on a degenerate corpus")]
    ZeroVariance,
    #[error("nonpositive time {0} under log normalization")]
    NonPositive(f64),
    #[error("split ratios {0:?} must each lie in (0,1) and sum to 1")]
    BadRatios([f64; 3]),
    #[error("unknown normalizer mode {0:?}")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub k: usize,
}

/// Non-empty list of events with non-decreasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    events: Vec<Event>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>) -> Result<Self, DataError> {
        Self::validated(events, 0)
    }

    fn validated(events: Vec<Event>, line: usize) -> Result<Self, DataError> {
        if events.is_empty() {
            return Err(DataError::EmptySequence);
        }
        for (index, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(DataError::BadTime { line, index });
            }
            if index > 0 && e.t < events[index - 1].t {
                return Err(DataError::NonMonotone { line, index });
            }
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.t).collect()
    }

    pub fn types(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.k).collect()
    }

    /// Inter-arrival gaps; the first gap is measured from time 0.
    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.events
            .iter()
            .map(|e| {
                let g = e.t - prev;
                prev = e.t;
                g
            })
            .collect()
    }

    /// Time of the last event, used as the observation horizon.
    pub fn t_max(&self) -> f64 {
        self.events.last().map(|e| e.t).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitTag {
    #[default]
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<EventSequence>,
    pub num_types: usize,
    pub split: SplitTag,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    events: Vec<Event>,
    #[serde(default)]
    num_types: Option<usize>,
}

#[derive(Serialize)]
struct SequenceRecordOut<'a> {
    events: &'a [Event],
    num_types: usize,
}

impl Dataset {
    pub fn new(sequences: Vec<EventSequence>, num_types: usize) -> Result<Self, DataError> {
        for (i, s) in sequences.iter().enumerate() {
            if let Some(e) = s.events().iter().find(|e| e.k >= num_types) {
                return Err(DataError::TypeOutOfRange {
                    line: i + 1,
                    k: e.k,
                    num_types,
                });
            }
        }
        Ok(Self {
            sequences,
            num_types: num_types.max(1),
            split: SplitTag::Train,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(EventSequence::len).sum()
    }

    /// Serialises to the line-delimited sequence format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            let rec = SequenceRecordOut {
                events: s.events(),
                num_types: self.num_types,
            };
            out.push_str(&serde_json::to_string(&rec).expect("events serialise"));
            out.push('\n');
        }
        out
    }
}

/// Parses a line-delimited sequence file. Blank lines are skipped.
pub fn parse_sequences(text: &str) -> Result<Dataset, DataError> {
    let mut sequences = Vec::new();
    let mut declared: Option<usize> = None;
    let mut max_type = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: SequenceRecord = serde_json::from_str(raw).map_err(|e| DataError::Malformed {
            line,
            msg: e.to_string(),
        })?;
        if let Some(m) = rec.num_types {
            if let Some(e) = rec.events.iter().find(|e| e.k >= m) {
                return Err(DataError::TypeOutOfRange {
                    line,
                    k: e.k,
                    num_types: m,
                });
            }
            declared = Some(declared.map_or(m, |d| d.max(m)));
        }
        if rec.events.is_empty() {
            return Err(DataError::Malformed {
                line,
                msg: "sequence has no events".into(),
            });
        }
        max_type = max_type.max(rec.events.iter().map(|e| e.k).max().unwrap_or(0));
        sequences.push(EventSequence::validated(rec.events, line)?);
    }
    let num_types = declared.unwrap_or(0).max(max_type + 1);
    Ok(Dataset {
        sequences,
        num_types,
        split: SplitTag::Train,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizerMode {
    #[default]
    None,
    Standard,
    LogStandard,
}

impl fmt::Display for NormalizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Standard => "standard",
            Self::LogStandard => "log-standard",
        })
    }
}

impl FromStr for NormalizerMode {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "standard" => Ok(Self::Standard),
            "log-standard" => Ok(Self::LogStandard),
            other => Err(DataError::UnknownMode(other.to_string())),
        }
    }
}

/// Divisor used by the log-standard mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleKind {
    #[default]
    Variance,
    Stddev,
}

impl fmt::Display for ScaleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Variance => "variance",
            Self::Stddev => "stddev",
        })
    }
}

impl FromStr for ScaleKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "variance" => Ok(Self::Variance),
            "stddev" => Ok(Self::Stddev),
            other => Err(DataError::UnknownMode(other.to_string())),
        }
    }
}

/// Affine (optionally log-domain) map on inter-arrival gaps.
///
/// * `none`: identity.
/// * `standard`: `(g - mean) / std`.
/// * `log-standard`: `(ln g - mean(ln g)) / var(ln g)`, or the standard
///   deviation when `scale_kind = stddev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mode: NormalizerMode,
    pub center: f64,
    pub scale: f64,
}

/// A sequence mapped into the model's working domain.
///
/// `gaps[i]` is the normalized gap before event `i` and `clock` its running
/// sum, which feeds the temporal encoding. Under the standard modes gaps may be
/// negative, so this is deliberately not an [`EventSequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSequence {
    pub gaps: Vec<f64>,
    pub clock: Vec<f64>,
    pub types: Vec<usize>,
}

impl NormalizedSequence {
    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mode: NormalizerMode::None,
            center: 0.0,
            scale: 1.0,
        }
    }

    /// Fits on every inter-event gap (events after the first) of `dataset`.
    pub fn fit(dataset: &Dataset, mode: NormalizerMode, scale_kind: ScaleKind) -> Result<Self, DataError> {
        if mode == NormalizerMode::None {
            return Ok(Self::identity());
        }
        let values: Vec<f64> = dataset
            .sequences
            .iter()
            .flat_map(|s| s.gaps().into_iter().skip(1))
            .map(|g| match mode {
                NormalizerMode::LogStandard => g.max(GAP_FLOOR).ln(),
                _ => g,
            })
            .collect();
        Self::fit_values(&values, mode, scale_kind)
    }

    /// Fits directly on (already log-transformed, for log mode) values.
    pub fn fit_values(values: &[f64], mode: NormalizerMode, scale_kind: ScaleKind) -> Result<Self, DataError> {
        if mode == NormalizerMode::None {
            return Ok(Self::identity());
        }
        if values.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 || !var.is_finite() {
            return Err(DataError::ZeroVariance);
        }
        let scale = match (mode, scale_kind) {
            (NormalizerMode::LogStandard, ScaleKind::Variance) => var,
            _ => var.sqrt(),
        };
        Ok(Self {
            mode,
            center: mean,
            scale,
        })
    }

    /// Maps one raw gap into the normalized domain.
    pub fn apply_value(&self, gap: f64) -> Result<f64, DataError> {
        match self.mode {
            NormalizerMode::None => Ok(gap),
            NormalizerMode::Standard => Ok((gap - self.center) / self.scale),
            NormalizerMode::LogStandard => {
                if gap < 0.0 || !gap.is_finite() {
                    return Err(DataError::NonPositive(gap));
                }
                Ok((gap.max(GAP_FLOOR).ln() - self.center) / self.scale)
            }
        }
    }

    pub fn invert_value(&self, value: f64) -> f64 {
        match self.mode {
            NormalizerMode::None => value,
            NormalizerMode::Standard => value * self.scale + self.center,
            NormalizerMode::LogStandard => (value * self.scale + self.center).exp(),
        }
    }

    pub fn apply(&self, sequence: &EventSequence) -> Result<NormalizedSequence, DataError> {
        let gaps = sequence
            .gaps()
            .into_iter()
            .map(|g| self.apply_value(g))
            .collect::<Result<Vec<_>, _>>()?;
        let mut acc = 0.0;
        let clock = gaps
            .iter()
            .map(|g| {
                acc += g;
                acc
            })
            .collect();
        Ok(NormalizedSequence {
            gaps,
            clock,
            types: sequence.types(),
        })
    }

    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.invert_value(v)).collect()
    }

    /// One-line textual form used in checkpoint headers.
    pub fn to_header(&self) -> String {
        format!("mode={} center={:?} scale={:?}", self.mode, self.center, self.scale)
    }

    pub fn from_header(line: &str) -> Option<Self> {
        let mut out = Self::identity();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=')?;
            match k {
                "mode" => out.mode = v.parse().ok()?,
                "center" => out.center = v.parse().ok()?,
                "scale" => out.scale = v.parse().ok()?,
                _ => return None,
            }
        }
        Some(out)
    }
}

/// Sequence-level train/dev/test partition, deterministic in `seed`.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), DataError> {
    if ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_dev = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize], split: SplitTag| Dataset {
        sequences: idx.iter().map(|&i| dataset.sequences[i].clone()).collect(),
        num_types: dataset.num_types,
        split,
    };
    Ok((
        take(&order[..n_train], SplitTag::Train),
        take(&order[n_train..n_train + n_dev], SplitTag::Dev),
        take(&order[n_train + n_dev..], SplitTag::Test),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub num_types: usize,
    pub num_events: usize,
    pub avg_length: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "types={} events={} avg_length={:.0}",
            self.num_types, self.num_events, self.avg_length
        )
    }
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let num_events = dataset.num_events();
    Ok(DatasetStats {
        num_types: dataset.num_types,
        num_events,
        avg_length: num_events as f64 / dataset.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(times: &[f64]) -> EventSequence {
        EventSequence::new(times.iter().map(|&t| Event { t, k: 0 }).collect()).unwrap()
    }

    #[test]
    fn minimal_record() {
        let ds = parse_sequences("{\"events\":[{\"t\":0.5,\"k\":0}],\"num_types\":1}\n").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sequences[0].len(), 1);
        assert_eq!(ds.num_types, 1);
    }

    #[test]
    fn decreasing_times_rejected() {
        let err = parse_sequences("{\"events\":[{\"t\":2.0,\"k\":0},{\"t\":1.0,\"k\":0}]}").unwrap_err();
        assert_eq!(err, DataError::NonMonotone { line: 1, index: 1 });
        assert!(err.to_string().contains("non-monotone timestamps"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"events\":[{\"t\":0.1,\"k\":0}]}\n{\"events\":[{\"t\":\"x\"}]}\n";
        match parse_sequences(text).unwrap_err() {
            DataError::Malformed { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn type_beyond_declared_count() {
        let err = parse_sequences("{\"events\":[{\"t\":0.1,\"k\":3}],\"num_types\":3}").unwrap_err();
        assert!(matches!(err, DataError::TypeOutOfRange { k: 3, num_types: 3, .. }));
    }

    #[test]
    fn num_types_inferred() {
        let ds = parse_sequences("{\"events\":[{\"t\":0.1,\"k\":4}]}\n\n{\"events\":[{\"t\":0.3,\"k\":1}]}").unwrap();
        assert_eq!(ds.num_types, 5);
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = Dataset::new(vec![seq(&[0.25, 1.0]), seq(&[3.5])], 2).unwrap();
        let back = parse_sequences(&ds.to_jsonl()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn log_normalizer_on_known_values() {
        // log-times {0, 2}: mean 1, population variance 1
        let n = Normalizer::fit_values(&[0.0, 2.0], NormalizerMode::LogStandard, ScaleKind::Variance).unwrap();
        assert_eq!((n.center, n.scale), (1.0, 1.0));
        assert_eq!(n.apply_value(1.0).unwrap(), -1.0);
        assert!((n.apply_value(2f64.exp()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(n.invert_value(-1.0), 1.0);
    }

    #[test]
    fn stddev_switch() {
        let n = Normalizer::fit_values(&[0.0, 4.0], NormalizerMode::LogStandard, ScaleKind::Stddev).unwrap();
        assert_eq!(n.scale, 2.0);
        let v = Normalizer::fit_values(&[0.0, 4.0], NormalizerMode::LogStandard, ScaleKind::Variance).unwrap();
        assert_eq!(v.scale, 4.0);
    }

    #[test]
    fn identity_mode() {
        let s = seq(&[0.3, 1.7]);
        let ds = Dataset::new(vec![s.clone()], 1).unwrap();
        let n = Normalizer::fit(&ds, NormalizerMode::None, ScaleKind::Variance).unwrap();
        let out = n.apply(&s).unwrap();
        assert_eq!(out.clock, vec![0.3, 1.7]);
        assert!((out.gaps[1] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_rejected() {
        let ds = Dataset::new(vec![seq(&[1.0, 2.0, 3.0]), seq(&[0.5, 1.5])], 1).unwrap();
        for mode in [NormalizerMode::Standard, NormalizerMode::LogStandard] {
            assert_eq!(Normalizer::fit(&ds, mode, ScaleKind::Variance), Err(DataError::ZeroVariance));
        }
    }

    #[test]
    fn negative_gap_under_log_mode() {
        let n = Normalizer {
            mode: NormalizerMode::LogStandard,
            center: 0.0,
            scale: 1.0,
        };
        assert_eq!(n.apply_value(-0.5), Err(DataError::NonPositive(-0.5)));
        // ties are floored, not rejected
        assert!((n.apply_value(0.0).unwrap() - GAP_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn apply_then_invert_gaps() {
        let s = seq(&[0.3, 2.0, 2.2, 5.0]);
        let ds = Dataset::new(vec![s.clone()], 1).unwrap();
        for mode in [NormalizerMode::Standard, NormalizerMode::LogStandard] {
            let n = Normalizer::fit(&ds, mode, ScaleKind::Variance).unwrap();
            let back = n.invert(&n.apply(&s).unwrap().gaps);
            for (a, b) in back.iter().zip(s.gaps()) {
                assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn header_round_trip() {
        let n = Normalizer {
            mode: NormalizerMode::LogStandard,
            center: -0.123456789012345,
            scale: 3.3e-7,
        };
        assert_eq!(Normalizer::from_header(&n.to_header()), Some(n));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = Dataset::new((0..10).map(|i| seq(&[i as f64 + 0.5])).collect(), 1).unwrap();
        let (a, b, c) = split(&ds, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let (a2, b2, c2) = split(&ds, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((a, b, c), (a2, b2, c2));
    }

    #[test]
    fn bad_ratios() {
        let ds = Dataset::new(vec![seq(&[1.0])], 1).unwrap();
        assert!(matches!(split(&ds, [0.5, 0.6, 0.1], 0), Err(DataError::BadRatios(_))));
        assert!(split(&ds, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn stats() {
        let one = Dataset::new(vec![seq(&[1.0])], 4).unwrap();
        let s = dataset_stats(&one).unwrap();
        assert_eq!((s.num_types, s.num_events, s.avg_length), (4, 1, 1.0));
        let two = Dataset::new(vec![seq(&[1.0, 2.0, 3.0]), seq(&[1.0, 2.0, 3.0, 4.0, 5.0])], 1).unwrap();
        assert_eq!(dataset_stats(&two).unwrap().avg_length, 4.0);
        let empty = Dataset::new(vec![], 1).unwrap();
        assert_eq!(dataset_stats(&empty), Err(DataError::EmptyDataset));
    }

    proptest! {
        #[test]
        fn invert_apply_round_trip(gaps in proptest::collection::vec(1e-6f64..1e3, 2..40)) {
            let mut t = 0.0;
            let events: Vec<Event> = gaps.iter().map(|g| { t += g; Event { t, k: 0 } }).collect();
            let s = EventSequence::new(events).unwrap();
            let ds = Dataset::new(vec![s.clone()], 1).unwrap();
            for mode in [NormalizerMode::None, NormalizerMode::Standard, NormalizerMode::LogStandard] {
                if let Ok(n) = Normalizer::fit(&ds, mode, ScaleKind::Variance) {
                    let back = n.invert(&n.apply(&s).unwrap().gaps);
                    for (a, b) in back.iter().zip(s.gaps()) {
                        prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12));
                    }
                }
            }
        }

        #[test]
        fn split_is_a_partition(n in 3usize..60, seed in 0u64..1000) {
            let ds = Dataset::new((0..n).map(|i| seq(&[i as f64])).collect(), 1).unwrap();
            let (a, b, c) = split(&ds, [0.6, 0.2, 0.2], seed).unwrap();
            let mut all: Vec<f64> = a.sequences.iter().chain(&b.sequences).chain(&c.sequences)
                .map(|s| s.events()[0].t).collect();
            all.sort_by(f64::total_cmp);
            prop_assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        }

        #[test]
        fn event_count_is_sum_of_lengths(lens in proptest::collection::vec(1usize..20, 1..20)) {
            let seqs: Vec<EventSequence> = lens.iter()
                .map(|&l| seq(&(0..l).map(|i| i as f64).collect::<Vec<_>>())).collect();
            let ds = Dataset::new(seqs, 1).unwrap();
            prop_assert_eq!(dataset_stats(&ds).unwrap().num_events, lens.iter().sum::<usize>());
        }
    }
}
