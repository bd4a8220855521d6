//! Score-matching objectives and the optimisation loop.
//!
//! Per predicted event `i` (every event after the first) with hidden state
//! `h(i-1)` and gap `Δ_i`:
//!
//! * exact score matching: `½ψ(Δ_i)² + ∂Δψ(Δ_i)`
//! * denoising score matching: `½(ψ(Δ_i + σz) + z/σ)²`, averaged over `S`
//!   draws of `z`; the target is the score `(Δ_i − Δ^σ)/σ²` of the Gaussian
//!   perturbation
//! * type cross-entropy at the true gap
//!
//! All terms are averaged over predicted events; the combined loss is
//! `α · score + type`.

use crate::autodiff::{finite_diff_check, Array, AutodiffError, Graph, Var};
use crate::data::NormalizedSequence;
use crate::encoder::{encode, DropoutMasks, EncoderVars};
use crate::head::{graph_score, graph_type_log_probs, HeadVars};
use crate::model::{Model, ModelError, ModelVars, ParamMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no predictable events (every sequence needs at least two events)")]
    NoEvents,
    #[error("{0}")]
    Callback(String),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        Self::Model(ModelError::Autodiff(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Denoising score matching.
    Dsm,
    /// Exact score matching.
    Sm,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dsm => "dsm",
            Self::Sm => "sm",
        })
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dsm" => Ok(Self::Dsm),
            "sm" => Ok(Self::Sm),
            other => Err(format!("unknown objective `{other}` (dsm|sm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Weight of the score term.
    pub alpha: f64,
    /// Standard deviation of the gap perturbation.
    pub sigma: f64,
    /// Perturbations per event.
    pub perturbations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm threshold; 0 disables clipping.
    pub clip_norm: f64,
    /// Parameter-name prefixes held fixed during training.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dsm,
            alpha: 1.0,
            sigma: 0.1,
            perturbations: 100,
            batch_size: 4,
            lr: 1e-4,
            epochs: 50,
            seed: 0,
            clip_norm: 5.0,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        if self.objective == Objective::Dsm && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be > 0 for dsm");
        }
        if self.perturbations == 0 {
            return bad("perturbations must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0");
        }
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Summed (not averaged) loss terms of one sequence, as graph nodes.
struct SequenceTerms {
    score: Option<Var>,
    types: Var,
    events: usize,
}

/// Which score objective to build, with its noise for the denoising case.
enum ScoreTerm<'a> {
    None,
    Exact,
    Denoising { sigma: f64, noise: &'a [f64], per_event: usize },
}

fn predicted_events(batch: &[NormalizedSequence]) -> usize {
    batch.iter().map(|s| s.len().saturating_sub(1)).sum()
}

fn build_terms(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    seq: &NormalizedSequence,
    score: ScoreTerm<'_>,
    masks: &DropoutMasks,
) -> Result<SequenceTerms, TrainError> {
    let n = seq.len() - 1;
    let config = model.config();
    let hidden = encode(g, &vars.encoder, &config.encoder, &seq.clock, &seq.types, masks).map_err(ModelError::from)?;
    let history = g.slice_rows(hidden, 0, n)?;
    let true_gaps = Array::column(seq.gaps[1..].to_vec());

    let score = match score {
        ScoreTerm::None => None,
        ScoreTerm::Exact => {
            let expand: Vec<usize> = (0..n).collect();
            let out = graph_score(g, &vars.head, config.head, history, &expand, &true_gaps, true)?;
            let sq = g.mul(out.psi, out.psi)?;
            let sq = g.sum(sq)?;
            let half = g.affine(sq, 0.5, 0.0)?;
            let d = g.sum(out.dpsi_dt.expect("requested"))?;
            Some(g.add(half, d)?)
        }
        ScoreTerm::Denoising { sigma, noise, per_event } => {
            let expand: Vec<usize> = (0..n * per_event).map(|r| r / per_event).collect();
            let perturbed = Array::column(
                expand
                    .iter()
                    .zip(noise)
                    .map(|(&i, z)| seq.gaps[i + 1] + sigma * z)
                    .collect(),
            );
            let target = Array::column(noise.iter().map(|z| -z / sigma).collect());
            let out = graph_score(g, &vars.head, config.head, history, &expand, &perturbed, false)?;
            let target = g.constant(target);
            let diff = g.sub(out.psi, target)?;
            let sq = g.mul(diff, diff)?;
            let sq = g.sum(sq)?;
            Some(g.affine(sq, 0.5 / per_event as f64, 0.0)?)
        }
    };

    let log_probs = graph_type_log_probs(g, &vars.head, history, &true_gaps)?;
    let one_hot = Array::from_fn(n, config.num_types, |r, k| f64::from(u8::from(seq.types[r + 1] == k)));
    let one_hot = g.constant(one_hot);
    let picked = g.mul(log_probs, one_hot)?;
    let picked = g.sum(picked)?;
    let types = g.affine(picked, -1.0, 0.0)?;
    Ok(SequenceTerms {
        score,
        types,
        events: n,
    })
}

fn draw_noise<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Evaluation-mode loss sums `(score, type, events)` over a batch.
fn evaluate_sums<R: Rng + ?Sized>(
    model: &Model,
    batch: &[NormalizedSequence],
    objective: Option<(Objective, f64, usize)>,
    rng: &mut R,
) -> Result<(f64, f64, usize), TrainError> {
    let (mut score, mut types, mut events) = (0.0, 0.0, 0);
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        let mut g = Graph::new();
        let (vars, _) = model.bind(&mut g, |_| false);
        let noise;
        let term = match objective {
            None => ScoreTerm::None,
            Some((Objective::Sm, _, _)) => ScoreTerm::Exact,
            Some((Objective::Dsm, sigma, s)) => {
                noise = draw_noise((seq.len() - 1) * s, rng);
                ScoreTerm::Denoising {
                    sigma,
                    noise: &noise,
                    per_event: s,
                }
            }
        };
        let t = build_terms(&mut g, model, &vars, seq, term, &DropoutMasks::none())?;
        score += t.score.map_or(0.0, |v| g.value(v).item());
        types += g.value(t.types).item();
        events += t.events;
    }
    if events == 0 {
        return Err(TrainError::NoEvents);
    }
    Ok((score, types, events))
}

/// A loss whose parameter gradient [`loss_gradient_check`] can verify.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckedLoss {
    Sm,
    Dsm { sigma: f64, perturbations: usize },
    Type,
    Combined { objective: Objective, alpha: f64, sigma: f64, perturbations: usize },
}

/// Compares the backpropagated gradient of `loss` (averaged over the batch's
/// predicted events, dropout off) with central finite differences over every
/// parameter. Returns the worst relative error. Denoising noise is drawn once
/// from `seed` and held fixed.
pub fn loss_gradient_check(
    model: &Model,
    batch: &[NormalizedSequence],
    loss: CheckedLoss,
    step: f64,
    seed: u64,
) -> Result<f64, TrainError> {
    let batch: Vec<&NormalizedSequence> = batch.iter().filter(|s| s.len() >= 2).collect();
    let events = batch.iter().map(|s| s.len() - 1).sum::<usize>();
    if events == 0 {
        return Err(TrainError::NoEvents);
    }
    let (objective, alpha, sigma, per_event) = match loss {
        CheckedLoss::Sm => (Some(Objective::Sm), 1.0, 0.0, 1),
        CheckedLoss::Dsm { sigma, perturbations } => (Some(Objective::Dsm), 1.0, sigma, perturbations),
        CheckedLoss::Type => (None, 0.0, 0.0, 1),
        CheckedLoss::Combined { objective, alpha, sigma, perturbations } => (Some(objective), alpha, sigma, perturbations),
    };
    let with_types = matches!(loss, CheckedLoss::Type | CheckedLoss::Combined { .. });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<f64>> = batch
        .iter()
        .map(|s| draw_noise((s.len() - 1) * per_event, &mut rng))
        .collect();
    let inputs: Vec<(String, Array)> = model.params().iter().map(|(n, a)| (n.clone(), a.clone())).collect();
    let index: std::collections::BTreeMap<&str, usize> =
        inputs.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
    let scale = 1.0 / events as f64;
    let failure = std::cell::RefCell::new(None);
    let result = finite_diff_check(&inputs, step, |g, vars| {
        let lookup = |n: &str| Ok::<_, AutodiffError>(vars[index[n]]);
        let mv = ModelVars {
            encoder: EncoderVars::bind(&model.config().encoder, lookup)?,
            head: HeadVars::bind(lookup)?,
        };
        let mut total: Option<Var> = None;
        for (seq, z) in batch.iter().zip(&noise) {
            let term = match objective {
                None => ScoreTerm::None,
                Some(Objective::Sm) => ScoreTerm::Exact,
                Some(Objective::Dsm) => ScoreTerm::Denoising {
                    sigma,
                    noise: z,
                    per_event,
                },
            };
            let t = build_terms(g, model, &mv, seq, term, &DropoutMasks::none()).map_err(|e| match e {
                TrainError::Model(ModelError::Autodiff(a)) => a,
                other => {
                    failure.replace(Some(other));
                    AutodiffError::Empty("loss graph")
                }
            })?;
            let mut part = match t.score {
                Some(s) => g.affine(s, alpha, 0.0)?,
                None => g.affine(t.types, 0.0, 0.0)?,
            };
            if with_types {
                part = g.add(part, t.types)?;
            }
            total = Some(match total {
                Some(acc) => g.add(acc, part)?,
                None => part,
            });
        }
        g.affine(total.expect("nonempty batch"), scale, 0.0)
    });
    match (result, failure.into_inner()) {
        (_, Some(e)) => Err(e),
        (r, None) => Ok(r.map_err(ModelError::from)?),
    }
}

/// Exact score-matching loss, averaged over predicted events.
pub fn sm_loss(model: &Model, batch: &[NormalizedSequence]) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (s, _, n) = evaluate_sums(model, batch, Some((Objective::Sm, 0.0, 1)), &mut rng)?;
    Ok(s / n as f64)
}

/// Denoising score-matching loss, averaged over events and perturbations.
pub fn dsm_loss<R: Rng + ?Sized>(
    model: &Model,
    batch: &[NormalizedSequence],
    sigma: f64,
    perturbations: usize,
    rng: &mut R,
) -> Result<f64, TrainError> {
    if !(sigma > 0.0) || perturbations == 0 {
        return Err(TrainError::Config("dsm needs sigma > 0 and at least one perturbation".into()));
    }
    let (s, _, n) = evaluate_sums(model, batch, Some((Objective::Dsm, sigma, perturbations)), rng)?;
    Ok(s / n as f64)
}

/// Mean negative log-probability of the true types at the true gaps.
pub fn type_loss(model: &Model, batch: &[NormalizedSequence]) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, t, n) = evaluate_sums(model, batch, None, &mut rng)?;
    Ok(t / n as f64)
}

/// Loss breakdown for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub score: f64,
    pub types: f64,
    pub combined: f64,
    pub events: usize,
}

/// `α · score + type`, both averaged over predicted events.
pub fn combined_loss<R: Rng + ?Sized>(
    model: &Model,
    batch: &[NormalizedSequence],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossParts, TrainError> {
    let (s, t, n) = evaluate_sums(
        model,
        batch,
        Some((config.objective, config.sigma, config.perturbations)),
        rng,
    )?;
    let (score, types) = (s / n as f64, t / n as f64);
    Ok(LossParts {
        score,
        types,
        combined: config.alpha * score + types,
        events: n,
    })
}

/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new() -> Self {
        Self {
            step: 0,
            m: ParamMap::new(),
            v: ParamMap::new(),
        }
    }

    /// One bias-corrected step on every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(grad.rows(), grad.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(grad.rows(), grad.cols()));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *mv = Self::BETA1 * *mv + (1.0 - Self::BETA1) * gv;
                *vv = Self::BETA2 * *vv + (1.0 - Self::BETA2) * gv * gv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + Self::EPS);
            }
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamMap, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|a| a.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for a in grads.values_mut() {
            a.scale_in_place(s);
        }
    }
    norm
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_score: f64,
    pub train_type: f64,
    pub train_loss: f64,
    pub dev: Option<LossParts>,
}

impl fmt::Display for EpochSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} train_score={:.6} train_type={:.6}",
            self.epoch, self.train_loss, self.train_score, self.train_type
        )?;
        if let Some(d) = &self.dev {
            write!(f, " dev_loss={:.6} dev_score={:.6} dev_type={:.6}", d.combined, d.score, d.types)?;
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Owns a model and its optimiser state across epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
}

struct SequenceGrad {
    score: f64,
    types: f64,
    grads: Vec<(String, Array)>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            model,
            adam: AdamState::new(),
            config,
            epoch: 0,
        })
    }

    /// Forward and backward for one sequence; the loss is pre-divided by
    /// `total_events` so gradients over a batch simply add up.
    fn sequence_gradient(&self, seq: &NormalizedSequence, total_events: usize, rng: &mut ChaCha8Rng) -> Result<SequenceGrad, TrainError> {
        let cfg = &self.config;
        let mut g = Graph::new();
        let (vars, inputs) = self.model.bind(&mut g, |n| cfg.is_trainable(n));
        let masks = DropoutMasks::sample(&self.model.config().encoder, seq.len(), rng);
        let noise;
        let term = match cfg.objective {
            Objective::Sm => ScoreTerm::Exact,
            Objective::Dsm => {
                noise = draw_noise((seq.len() - 1) * cfg.perturbations, rng);
                ScoreTerm::Denoising {
                    sigma: cfg.sigma,
                    noise: &noise,
                    per_event: cfg.perturbations,
                }
            }
        };
        let terms = build_terms(&mut g, &self.model, &vars, seq, term, &masks)?;
        let score_sum = terms.score.expect("score term requested");
        let inv = 1.0 / total_events as f64;
        let a = g.affine(score_sum, cfg.alpha * inv, 0.0)?;
        let b = g.affine(terms.types, inv, 0.0)?;
        let loss = g.add(a, b)?;
        let mut grads = g.backward(loss)?;
        let grads = inputs
            .into_iter()
            .filter_map(|(name, v)| grads.take(v).map(|a| (name, a)))
            .collect();
        Ok(SequenceGrad {
            score: g.value(score_sum).item(),
            types: g.value(terms.types).item(),
            grads,
        })
    }

    /// One pass over `train` in a seeded random order, then the dev loss.
    pub fn run_epoch(&mut self, train: &[NormalizedSequence], dev: &[NormalizedSequence]) -> Result<EpochSummary, TrainError> {
        let epoch = self.epoch;
        let usable: Vec<usize> = (0..train.len()).filter(|&i| train[i].len() >= 2).collect();
        if usable.is_empty() {
            return Err(TrainError::NoEvents);
        }
        let mut order = usable;
        order.shuffle(&mut stream_rng(self.config.seed, (1 << 40) + epoch as u64));

        let (mut score_sum, mut type_sum, mut events) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let total: usize = chunk.iter().map(|&i| train[i].len() - 1).sum();
            let results: Vec<Result<SequenceGrad, TrainError>> = chunk
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let stream = ((epoch as u64) << 32) | (b * self.config.batch_size + pos) as u64;
                    let mut rng = stream_rng(self.config.seed, stream);
                    self.sequence_gradient(&train[i], total, &mut rng)
                })
                .collect();
            let mut grads = ParamMap::new();
            for r in results {
                let r = r.map_err(|e| match e {
                    TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite { node, op })) => TrainError::NonFinite {
                        epoch,
                        batch: b,
                        detail: format!("node {node} ({op})"),
                    },
                    other => other,
                })?;
                score_sum += r.score;
                type_sum += r.types;
                for (name, g) in r.grads {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
            }
            events += total;
            if grads.values().any(|a| !a.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    detail: "gradient".into(),
                });
            }
            clip_global_norm(&mut grads, self.config.clip_norm);
            self.adam.update(self.model.params_mut(), &grads, self.config.lr);
            if let Some((name, _)) = self.model.params().iter().find(|(_, a)| !a.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("parameter {name} after update"),
                });
            }
        }
        let train_score = score_sum / events as f64;
        let train_type = type_sum / events as f64;
        let dev = if dev.iter().any(|s| s.len() >= 2) {
            let mut rng = stream_rng(self.config.seed, u64::MAX);
            Some(combined_loss(&self.model, dev, &self.config, &mut rng)?)
        } else {
            None
        };
        self.epoch += 1;
        Ok(EpochSummary {
            epoch: self.epoch,
            train_score,
            train_type,
            train_loss: self.config.alpha * train_score + train_type,
            dev,
        })
    }
}

/// Runs `config.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: Model,
    config: &TrainConfig,
    train_set: &[NormalizedSequence],
    dev_set: &[NormalizedSequence],
    mut on_epoch: impl FnMut(&EpochSummary, &Trainer) -> Result<(), TrainError>,
) -> Result<Trainer, TrainError> {
    let mut trainer = Trainer::new(model, config.clone())?;
    if config.epochs > 0 && predicted_events(train_set) == 0 {
        return Err(TrainError::NoEvents);
    }
    for _ in 0..config.epochs {
        let summary = trainer.run_epoch(train_set, dev_set)?;
        on_epoch(&summary, &trainer)?;
    }
    Ok(trainer)
}
