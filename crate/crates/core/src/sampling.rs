//! Langevin sampling of next-event gaps from a score function.
//!
//! A chain starts from `Uniform(0, prior_max)` and iterates
//!
//! ```text
//! x ← x + (ε/2) ψ(x) + √ε z
//! ```
//!
//! `langevin_ds` follows the chain with one denoising step `x + s·ψ(x)`
//! (`s = σ` by default, `σ²` for the classical Tweedie correction). The mirror
//! variant runs the same dynamics on `y = ln x`, where the target's score is
//! `xψ(x) + 1`, so every state stays positive.
//!
//! Everything happens in the model's normalised domain; emitted gaps are mapped
//! back to original units and clamped at zero.

use crate::data::{Dataset, NormalizedSequence, Normalizer};
use crate::hawkes::{HawkesError, HawkesParams, NextEventDistribution};
use crate::head::EventHead;
use crate::metrics::SamplePack;
use crate::model::{Model, ModelError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("chain diverged at step {step} (state {state})")]
    Diverged { step: usize, state: f64 },
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Hawkes(#[from] HawkesError),
    #[error("malformed sample record on line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Anything that can report the score of a next-gap density.
pub trait ScoreFunction {
    fn score(&self, gap: f64) -> f64;
}

impl ScoreFunction for EventHead {
    fn score(&self, gap: f64) -> f64 {
        EventHead::score(self, gap)
    }
}

impl ScoreFunction for NextEventDistribution {
    /// NaN where the density vanishes, which a chain reports as divergence.
    fn score(&self, gap: f64) -> f64 {
        NextEventDistribution::score(self, gap).unwrap_or(f64::NAN)
    }
}

/// Adapts a closure into a [`ScoreFunction`].
pub struct FnScore<F>(pub F);

impl<F: Fn(f64) -> f64> ScoreFunction for FnScore<F> {
    fn score(&self, gap: f64) -> f64 {
        (self.0)(gap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    /// Langevin followed by one denoising step.
    LangevinDs,
    Langevin,
    Mirror,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LangevinDs => "langevin_ds",
            Self::Langevin => "langevin",
            Self::Mirror => "mirror",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "langevin_ds" => Ok(Self::LangevinDs),
            "langevin" => Ok(Self::Langevin),
            "mirror" => Ok(Self::Mirror),
            other => Err(format!("unknown algorithm `{other}` (langevin_ds|langevin|mirror)")),
        }
    }
}

/// Multiplier of the score in the denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenoiseScale {
    Sigma,
    SigmaSquared,
}

impl fmt::Display for DenoiseScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sigma => "sigma",
            Self::SigmaSquared => "sigma_squared",
        })
    }
}

impl FromStr for DenoiseScale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigma" => Ok(Self::Sigma),
            "sigma_squared" => Ok(Self::SigmaSquared),
            other => Err(format!("unknown denoise scale `{other}` (sigma|sigma_squared)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub steps: usize,
    pub samples: usize,
    /// Upper end of the uniform initial state, in the normalised domain.
    pub prior_max: f64,
    pub algorithm: Algorithm,
    pub sigma: f64,
    pub denoise_scale: DenoiseScale,
    /// Include the `+1` Jacobian drift in the mirror chain.
    pub mirror_correction: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            step_size: 5e-2,
            steps: 1000,
            samples: 100,
            prior_max: 1.0,
            algorithm: Algorithm::LangevinDs,
            sigma: 0.1,
            denoise_scale: DenoiseScale::Sigma,
            mirror_correction: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::Config(m.to_string()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be > 0");
        }
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.samples == 0 {
            return bad("samples must be >= 1");
        }
        if !(self.prior_max > 0.0 && self.prior_max.is_finite()) {
            return bad("prior_max must be > 0");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be >= 0");
        }
        Ok(())
    }

    fn denoise_multiplier(&self) -> f64 {
        match self.denoise_scale {
            DenoiseScale::Sigma => self.sigma,
            DenoiseScale::SigmaSquared => self.sigma * self.sigma,
        }
    }
}

/// Unadjusted Langevin chain from `x0`; `noise` supplies the standard normals.
pub fn langevin_chain<S: ScoreFunction + ?Sized>(
    score: &S,
    x0: f64,
    step_size: f64,
    steps: usize,
    noise: &mut impl FnMut() -> f64,
) -> Result<f64, SampleError> {
    let (half, root) = (0.5 * step_size, step_size.sqrt());
    let mut x = x0;
    for step in 0..steps {
        x += half * score.score(x) + root * noise();
        if !x.is_finite() {
            return Err(SampleError::Diverged { step, state: x });
        }
    }
    Ok(x)
}

/// Langevin chain in `y = ln x` for a positive target. `x0` must be positive.
pub fn mirror_langevin_chain<S: ScoreFunction + ?Sized>(
    score: &S,
    x0: f64,
    step_size: f64,
    steps: usize,
    correction: bool,
    noise: &mut impl FnMut() -> f64,
) -> Result<f64, SampleError> {
    if !(x0 > 0.0) {
        return Err(SampleError::Config(format!("mirror chain needs a positive start, got {x0}")));
    }
    let (half, root) = (0.5 * step_size, step_size.sqrt());
    let jacobian = if correction { 1.0 } else { 0.0 };
    let mut y = x0.ln();
    for step in 0..steps {
        let x = y.exp();
        y += half * (x * score.score(x) + jacobian) + root * noise();
        if !y.is_finite() || y > 700.0 {
            return Err(SampleError::Diverged { step, state: y.exp() });
        }
    }
    Ok(y.exp())
}

/// `x + scale · ψ(x)`.
pub fn tweedie_denoise<S: ScoreFunction + ?Sized>(score: &S, x: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        return x;
    }
    x + scale * score.score(x)
}

/// Final states of `config.samples` chains for one event, before denoising.
pub fn chain_states<S: ScoreFunction + ?Sized, R: Rng + ?Sized>(
    score: &S,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>, SampleError> {
    let mut out = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        // the mirror chain needs a strictly positive start
        let x0 = loop {
            let u = rng.gen_range(0.0..config.prior_max);
            if u > 0.0 || config.algorithm != Algorithm::Mirror {
                break u;
            }
        };
        let mut noise = || rng.sample::<f64, _>(StandardNormal);
        let x = match config.algorithm {
            Algorithm::Mirror => mirror_langevin_chain(
                score,
                x0,
                config.step_size,
                config.steps,
                config.mirror_correction,
                &mut noise,
            )?,
            _ => langevin_chain(score, x0, config.step_size, config.steps, &mut noise)?,
        };
        out.push(x);
    }
    Ok(out)
}

/// Turns chain states into emitted samples: optional denoising, a type draw
/// from the head at the (normalised, unclamped) gap, inversion of the
/// normalisation and the clamp at zero. Also returns how many gaps were clamped.
pub fn finalize_pack<R: Rng + ?Sized>(
    head: &EventHead,
    states: &[f64],
    config: &SamplerConfig,
    normalizer: &Normalizer,
    rng: &mut R,
) -> (SamplePack, usize) {
    let scale = config.denoise_multiplier();
    let mut times = Vec::with_capacity(states.len());
    let mut types = Vec::with_capacity(states.len());
    let mut clamped = 0;
    for &x in states {
        let x = if config.algorithm == Algorithm::LangevinDs {
            tweedie_denoise(head, x, scale)
        } else {
            x
        };
        types.push(draw_type(&head.type_distribution(x), rng));
        let t = normalizer.invert_value(x);
        if t < 0.0 || t.is_nan() {
            clamped += 1;
        }
        times.push(if t.is_nan() { 0.0 } else { t.max(0.0) });
    }
    (SamplePack::new(times, types), clamped)
}

fn draw_type<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.gen();
    for (k, p) in probs.iter().enumerate() {
        if u < *p {
            return k;
        }
        u -= p;
    }
    probs.len() - 1
}

/// U samples for the event that follows a history summarised by `head`.
pub fn sample_next_event<R: Rng + ?Sized>(
    head: &EventHead,
    config: &SamplerConfig,
    normalizer: &Normalizer,
    rng: &mut R,
) -> Result<SamplePack, SampleError> {
    config.validate()?;
    let states = chain_states(head, config, rng)?;
    Ok(finalize_pack(head, &states, config, normalizer, rng).0)
}

/// Nearest-rank 99th percentile of the normalised inter-event gaps.
pub fn default_prior_max(train: &[NormalizedSequence]) -> Result<f64, SampleError> {
    let mut gaps: Vec<f64> = train.iter().flat_map(|s| s.gaps.iter().skip(1).copied()).collect();
    if gaps.is_empty() {
        return Err(SampleError::Config("no training gaps to set prior_max from".into()));
    }
    gaps.sort_by(f64::total_cmp);
    let rank = ((0.99 * gaps.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let v = gaps[rank - 1];
    if v > 0.0 {
        Ok(v)
    } else {
        Err(SampleError::Config(format!("99th percentile of normalised gaps is {v}; set prior_max explicitly")))
    }
}

/// One line of a sample file: the true event and its samples, gaps in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub seq: usize,
    pub index: usize,
    /// True gap to the previous event.
    pub time: f64,
    #[serde(rename = "type")]
    pub event_type: usize,
    pub sample_times: Vec<f64>,
    pub sample_types: Vec<usize>,
}

impl SampleRecord {
    pub fn pack(&self) -> SamplePack {
        SamplePack::new(self.sample_times.clone(), self.sample_types.clone())
    }
}

pub fn records_to_jsonl(records: &[SampleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_records(text: &str) -> Result<Vec<SampleRecord>, SampleError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: SampleRecord = serde_json::from_str(l).map_err(|e| SampleError::Malformed {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if r.sample_times.is_empty() {
                return Err(SampleError::Malformed {
                    line: i + 1,
                    msg: "no samples".into(),
                });
            }
            if !r.sample_types.is_empty() && r.sample_types.len() != r.sample_times.len() {
                return Err(SampleError::Malformed {
                    line: i + 1,
                    msg: "sample_times and sample_types differ in length".into(),
                });
            }
            Ok(r)
        })
        .collect()
}

/// Counters gathered while sampling a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleDiagnostics {
    pub events: usize,
    pub samples: usize,
    pub clamped: usize,
}

fn event_rng(seed: u64, seq: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((seq as u64) << 24) | index as u64);
    rng
}

/// One-step-ahead samples for every predictable event of `dataset`, each
/// conditioned on the true history. Events run in parallel on the current
/// rayon pool; output order and values do not depend on the thread count.
pub fn sample_dataset(
    model: &Model,
    normalizer: &Normalizer,
    dataset: &Dataset,
    config: &SamplerConfig,
) -> Result<(Vec<SampleRecord>, SampleDiagnostics), SampleError> {
    let mut out = sample_dataset_variants(model, normalizer, dataset, config, &[config.algorithm])?;
    Ok(out.pop().expect("one variant"))
}

/// Like [`sample_dataset`], but runs each event's chains once and finalises
/// them under every algorithm in `variants` (which must all use the plain
/// chain, so `langevin` and `langevin_ds` only). Each variant's output equals
/// what [`sample_dataset`] produces for that algorithm with the same seed.
pub fn sample_dataset_variants(
    model: &Model,
    normalizer: &Normalizer,
    dataset: &Dataset,
    config: &SamplerConfig,
    variants: &[Algorithm],
) -> Result<Vec<(Vec<SampleRecord>, SampleDiagnostics)>, SampleError> {
    config.validate()?;
    if variants.len() > 1 && variants.contains(&Algorithm::Mirror) {
        return Err(SampleError::Config("the mirror chain cannot share states with other algorithms".into()));
    }
    let chain_config = SamplerConfig {
        algorithm: variants.first().copied().unwrap_or(config.algorithm),
        ..config.clone()
    };
    let mut jobs = Vec::new();
    for (s, seq) in dataset.sequences.iter().enumerate() {
        let normalized = normalizer.apply(seq)?;
        let heads = model.event_heads(&normalized)?;
        let gaps = seq.gaps();
        let types = seq.types();
        for (i, head) in heads.into_iter().enumerate() {
            jobs.push((s, i + 1, gaps[i + 1], types[i + 1], head));
        }
    }
    let results: Vec<Result<Vec<(SampleRecord, usize)>, SampleError>> = jobs
        .into_par_iter()
        .map(|(s, index, gap, k, head)| {
            let mut rng = event_rng(config.seed, s, index);
            let states = chain_states(&head, &chain_config, &mut rng)?;
            Ok(variants
                .iter()
                .map(|&algorithm| {
                    let cfg = SamplerConfig {
                        algorithm,
                        ..chain_config.clone()
                    };
                    let (pack, clamped) = finalize_pack(&head, &states, &cfg, normalizer, &mut rng.clone());
                    (
                        SampleRecord {
                            seq: s,
                            index,
                            time: gap,
                            event_type: k,
                            sample_times: pack.times,
                            sample_types: pack.types,
                        },
                        clamped,
                    )
                })
                .collect())
        })
        .collect();
    let mut out: Vec<(Vec<SampleRecord>, SampleDiagnostics)> =
        variants.iter().map(|_| (Vec::with_capacity(results.len()), SampleDiagnostics::default())).collect();
    for r in results {
        for ((records, diag), (rec, clamped)) in out.iter_mut().zip(r?) {
            diag.events += 1;
            diag.samples += rec.sample_times.len();
            diag.clamped += clamped;
            records.push(rec);
        }
    }
    Ok(out)
}

/// Exact samples from a Hawkes process by cdf inversion, in the same record
/// layout as [`sample_dataset`]. Types are drawn in proportion to the
/// per-type intensities at the sampled gap.
pub fn hawkes_oracle_records(
    params: &HawkesParams,
    dataset: &Dataset,
    samples: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>, SampleError> {
    params.validate()?;
    let mut jobs = Vec::new();
    for (s, seq) in dataset.sequences.iter().enumerate() {
        for index in 1..seq.len() {
            jobs.push((s, index));
        }
    }
    jobs.into_par_iter()
        .map(|(s, index)| {
            let events = dataset.sequences[s].events();
            let dist = NextEventDistribution::new(params, &events[..index])?;
            let mut rng = event_rng(seed, s, index);
            let mut times = Vec::with_capacity(samples);
            let mut types = Vec::with_capacity(samples);
            for _ in 0..samples {
                let gap = dist.sample_gap(&mut rng)?;
                let lam = dist.type_intensities(gap);
                let total: f64 = lam.iter().sum();
                let probs: Vec<f64> = lam.iter().map(|l| l / total).collect();
                types.push(draw_type(&probs, &mut rng));
                times.push(gap);
            }
            Ok(SampleRecord {
                seq: s,
                index,
                time: events[index].t - events[index - 1].t,
                event_type: events[index].k,
                sample_times: times,
                sample_types: types,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Array;
    use crate::head::{HeadKind, HeadParams};

    #[test]
    fn zero_score_and_zero_noise_is_a_fixed_point() {
        let zero = FnScore(|_| 0.0);
        let x = langevin_chain(&zero, 1.7, 0.1, 500, &mut || 0.0).unwrap();
        assert_eq!(x, 1.7);
        let y = mirror_langevin_chain(&zero, 1.7, 0.1, 500, false, &mut || 0.0).unwrap();
        assert!((y - 1.7).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let explode = FnScore(|x: f64| x * 1e300);
        let err = langevin_chain(&explode, 1.0, 1.0, 100, &mut || 0.0).unwrap_err();
        assert!(matches!(err, SampleError::Diverged { .. }));
    }

    #[test]
    fn gaussian_target_moments() {
        let score = FnScore(|x: f64| -(x - 3.0) / 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let x0 = rng.gen_range(0.0..6.0);
                langevin_chain(&score, x0, 1e-2, 500, &mut || rng.sample(StandardNormal)).unwrap()
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        // step 1e-2 inflates the variance by about ε/(4·0.25) relative; loose bounds here
        assert!((mean - 3.0).abs() < 0.05, "{mean}");
        assert!((var - 0.25).abs() < 0.03, "{var}");
    }

    #[test]
    fn tweedie_on_gaussian_convolution() {
        // clean N(0, 1) smoothed with noise variance σ² has score -y / (1 + σ²)
        for sigma in [0.1, 0.5, 1.0] {
            let score = FnScore(move |y: f64| -y / (1.0 + sigma * sigma));
            for y in [-2.0, 0.3, 4.0] {
                let out = tweedie_denoise(&score, y, sigma);
                assert!((out - y * (1.0 - sigma / (1.0 + sigma * sigma))).abs() < 1e-14);
            }
        }
        let score = FnScore(|y: f64| -y);
        assert_eq!(tweedie_denoise(&score, 2.5, 0.0), 2.5);
        assert_eq!(tweedie_denoise(&FnScore(|_| 0.0), 2.5, 0.3), 2.5);
    }

    #[test]
    fn mirror_chain_on_exponential_target() {
        let score = FnScore(|_| -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let mut total = 0.0;
        for _ in 0..n {
            let x0 = rng.gen_range(0.01..3.0);
            let x = mirror_langevin_chain(&score, x0, 1e-2, 600, true, &mut || rng.sample(StandardNormal)).unwrap();
            assert!(x > 0.0);
            total += x;
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.06, "{mean}");
    }

    #[test]
    fn mirror_outputs_stay_positive() {
        let score = FnScore(|x: f64| -3.0 * x);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x0 = rng.gen_range(0.001..2.0);
            let x = mirror_langevin_chain(&score, x0, 0.05, 10, true, &mut || rng.sample(StandardNormal)).unwrap();
            assert!(x > 0.0);
        }
    }

    fn one_hot_head(k: usize, m: usize) -> EventHead {
        let mut p = HeadParams::zeros(2, 2, m);
        let mut b = vec![0.0; m];
        b[k] = 60.0;
        p.g_b = Array::row(b);
        EventHead::new(&[0.1, -0.3], &p, HeadKind::Intensity)
    }

    #[test]
    fn one_hot_type_head_yields_that_type() {
        let head = one_hot_head(2, 4);
        let cfg = SamplerConfig {
            steps: 20,
            samples: 50,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pack = sample_next_event(&head, &cfg, &Normalizer::identity(), &mut rng).unwrap();
        assert!(pack.types.iter().all(|&k| k == 2));
        assert!(pack.times.iter().all(|&t| t >= 0.0 && t.is_finite()));
        assert_eq!(pack.len(), 50);
    }

    #[test]
    fn sampling_is_seeded() {
        let head = one_hot_head(0, 2);
        let cfg = SamplerConfig {
            steps: 50,
            samples: 10,
            ..SamplerConfig::default()
        };
        let a = sample_next_event(&head, &cfg, &Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_next_event(&head, &cfg, &Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn denoised_equals_plain_plus_one_step() {
        let mut p = HeadParams::zeros(2, 3, 2);
        p.f_w1 = Array::from_fn(2, 3, |r, c| 0.2 * (r + c) as f64 - 0.3);
        p.f_w3 = Array::column(vec![0.5, -0.4, 0.3]);
        let head = EventHead::new(&[0.7, -0.2], &p, HeadKind::Intensity);
        let base = SamplerConfig {
            steps: 100,
            samples: 20,
            sigma: 0.2,
            ..SamplerConfig::default()
        };
        let plain_cfg = SamplerConfig {
            algorithm: Algorithm::Langevin,
            ..base.clone()
        };
        let states = chain_states(&head, &base, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let plain = chain_states(&head, &plain_cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(states, plain);
        let id = Normalizer::identity();
        let (ds, _) = finalize_pack(&head, &states, &base, &id, &mut ChaCha8Rng::seed_from_u64(6));
        for (x, t) in states.iter().zip(&ds.times) {
            assert_eq!(*t, tweedie_denoise(&head, *x, 0.2).max(0.0));
        }
    }

    #[test]
    fn negative_states_are_clamped() {
        let head = one_hot_head(0, 1);
        let cfg = SamplerConfig {
            algorithm: Algorithm::Langevin,
            ..SamplerConfig::default()
        };
        let (pack, clamped) = finalize_pack(&head, &[-0.5, 0.5], &cfg, &Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(pack.times, vec![0.0, 0.5]);
        assert_eq!(clamped, 1);
    }

    #[test]
    fn record_round_trip() {
        let r = SampleRecord {
            seq: 3,
            index: 2,
            time: 0.25,
            event_type: 1,
            sample_times: vec![0.1, 0.7],
            sample_types: vec![1, 0],
        };
        let text = records_to_jsonl(&[r.clone()]);
        assert!(text.contains("\"type\":1"));
        assert_eq!(parse_records(&text).unwrap(), vec![r]);
        assert!(parse_records("{\"seq\":0}").is_err());
    }

    #[test]
    fn prior_max_is_the_99th_percentile() {
        let seq = NormalizedSequence {
            gaps: (0..=100).map(f64::from).collect(),
            clock: vec![0.0; 101],
            types: vec![0; 101],
        };
        // the first gap is skipped, leaving 1..=100
        assert_eq!(default_prior_max(&[seq]).unwrap(), 99.0);
    }

    #[test]
    fn config_validation() {
        let ok = SamplerConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            SamplerConfig { step_size: 0.0, ..ok.clone() },
            SamplerConfig { steps: 0, ..ok.clone() },
            SamplerConfig { samples: 0, ..ok.clone() },
            SamplerConfig { prior_max: -1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("mirror".parse::<Algorithm>().unwrap(), Algorithm::Mirror);
        assert!("gibbs".parse::<Algorithm>().is_err());
    }

    #[test]
    fn shared_chains_match_separate_runs() {
        use crate::data::{Event, EventSequence};
        use crate::encoder::{EncoderConfig, NormPlacement};
        use crate::model::ModelConfig;
        let model = Model::init(
            ModelConfig {
                encoder: EncoderConfig {
                    num_heads: 1,
                    num_layers: 1,
                    d_model: 4,
                    d_k: 2,
                    d_v: 2,
                    d_hidden: 4,
                    dropout: 0.0,
                    norm: NormPlacement::Pre,
                    residual: true,
                },
                d_f: 3,
                num_types: 2,
                head: HeadKind::Intensity,
            },
            5,
        )
        .unwrap();
        let seq = EventSequence::new(vec![
            Event { t: 0.2, k: 0 },
            Event { t: 0.9, k: 1 },
            Event { t: 1.4, k: 0 },
        ])
        .unwrap();
        let dataset = Dataset::new(vec![seq], 2).unwrap();
        let cfg = SamplerConfig {
            steps: 50,
            samples: 6,
            prior_max: 1.0,
            seed: 3,
            ..SamplerConfig::default()
        };
        let both = sample_dataset_variants(
            &model,
            &Normalizer::identity(),
            &dataset,
            &cfg,
            &[Algorithm::LangevinDs, Algorithm::Langevin],
        )
        .unwrap();
        for (variant, algorithm) in both.iter().zip([Algorithm::LangevinDs, Algorithm::Langevin]) {
            let alone = sample_dataset(
                &model,
                &Normalizer::identity(),
                &dataset,
                &SamplerConfig { algorithm, ..cfg.clone() },
            )
            .unwrap();
            assert_eq!(variant.0, alone.0);
        }
        assert_ne!(both[0].0[0].sample_times, both[1].0[0].sample_times);
    }
}
