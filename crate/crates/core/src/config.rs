//! Run configuration: a flat `section.key = value` text format and the
//! shipped profiles.

use crate::data::{NormalizerMode, ScaleKind};
use crate::encoder::{EncoderConfig, NormPlacement};
use crate::head::HeadKind;
use crate::metrics::QuantileGrid;
use crate::model::ModelConfig;
use crate::sampling::{Algorithm, DenoiseScale, SamplerConfig};
use crate::training::{Objective, TrainConfig};
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {msg}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        msg: String,
    },
    #[error("unknown profile `{0}` (stackoverflow|retweet|mimic2|financial|synthetic)")]
    UnknownProfile(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub normalizer: NormalizerMode,
    pub scale: ScaleKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub d_f: usize,
    pub head: HeadKind,
    /// Zero means "take it from the training data".
    pub num_types: usize,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    /// `None` derives the prior bound from the training gaps.
    pub prior_max: Option<f64>,
    pub eval: QuantileGrid,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            seed: 0,
            d_f: encoder.d_model,
            encoder,
            head: HeadKind::Intensity,
            num_types: 0,
            train: TrainConfig::default(),
            sample: SamplerConfig::default(),
            prior_max: None,
            eval: QuantileGrid::default(),
            data: DataConfig::default(),
        }
    }
}

struct Row {
    heads: usize,
    layers: usize,
    d_model: usize,
    d_kv: usize,
    d_hidden: usize,
    batch: usize,
    lr: f64,
    sigma: f64,
    step_size: f64,
    steps: usize,
}

impl RunConfig {
    pub const PROFILES: [&'static str; 5] = ["stackoverflow", "retweet", "mimic2", "financial", "synthetic"];

    /// Shipped hyperparameter sets. The four real-data profiles use the
    /// reference settings (50 epochs, 100 perturbations and samples); the
    /// synthetic profile is sized for the Hawkes end-to-end check.
    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        let (row, normalizer) = match name {
            "stackoverflow" => (
                Row { heads: 4, layers: 4, d_model: 64, d_kv: 16, d_hidden: 256, batch: 4, lr: 1e-4, sigma: 0.1, step_size: 5e-2, steps: 1000 },
                NormalizerMode::None,
            ),
            "retweet" => (
                Row { heads: 3, layers: 3, d_model: 64, d_kv: 16, d_hidden: 256, batch: 16, lr: 5e-3, sigma: 5e-2, step_size: 1e-3, steps: 5000 },
                NormalizerMode::LogStandard,
            ),
            "mimic2" => (
                Row { heads: 3, layers: 3, d_model: 64, d_kv: 16, d_hidden: 256, batch: 1, lr: 1e-4, sigma: 0.1, step_size: 2e-2, steps: 1000 },
                NormalizerMode::Standard,
            ),
            "financial" => (
                Row { heads: 6, layers: 6, d_model: 128, d_kv: 64, d_hidden: 2048, batch: 1, lr: 1e-4, sigma: 5e-2, step_size: 5e-3, steps: 3000 },
                NormalizerMode::LogStandard,
            ),
            "synthetic" => return Ok(Self::synthetic()),
            other => return Err(ConfigError::UnknownProfile(other.to_string())),
        };
        let mut cfg = Self::default();
        cfg.encoder = EncoderConfig {
            num_heads: row.heads,
            num_layers: row.layers,
            d_model: row.d_model,
            d_k: row.d_kv,
            d_v: row.d_kv,
            d_hidden: row.d_hidden,
            dropout: 0.1,
            norm: NormPlacement::Pre,
            residual: true,
        };
        cfg.d_f = row.d_model;
        cfg.train.batch_size = row.batch;
        cfg.train.lr = row.lr;
        cfg.train.sigma = row.sigma;
        cfg.train.epochs = 50;
        cfg.train.perturbations = 100;
        cfg.sample.sigma = row.sigma;
        cfg.sample.step_size = row.step_size;
        cfg.sample.steps = row.steps;
        cfg.sample.samples = 100;
        cfg.data.normalizer = normalizer;
        cfg.data.scale = ScaleKind::Variance;
        Ok(cfg)
    }

    fn synthetic() -> Self {
        let mut cfg = Self::default();
        cfg.encoder = EncoderConfig {
            num_heads: 2,
            num_layers: 2,
            d_model: 32,
            d_k: 16,
            d_v: 16,
            d_hidden: 64,
            dropout: 0.0,
            norm: NormPlacement::Pre,
            residual: true,
        };
        cfg.d_f = 16;
        cfg.train.batch_size = 16;
        cfg.train.lr = 2e-3;
        cfg.train.sigma = 0.1;
        cfg.train.epochs = 20;
        cfg.train.perturbations = 100;
        cfg.sample.sigma = 0.1;
        cfg.sample.step_size = 5e-2;
        cfg.sample.steps = 1000;
        cfg.sample.samples = 100;
        cfg.data.normalizer = NormalizerMode::None;
        cfg
    }

    pub fn model_config(&self, num_types: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            d_f: self.d_f,
            num_types,
            head: self.head,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.encoder.validate().map_err(|e| invalid(e.to_string()))?;
        if self.d_f == 0 {
            return Err(invalid("model.d_f must be positive".into()));
        }
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        let mut sample = self.sample.clone();
        if let Some(p) = self.prior_max {
            sample.prior_max = p;
        }
        sample.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                ConfigError::BadValue { key, value, msg, .. } => ConfigError::BadValue {
                    line: i + 1,
                    key,
                    value,
                    msg,
                },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Sets one key. Errors carry line 0; [`RunConfig::apply_text`] fills in the line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| ConfigError::BadValue {
                line: 0,
                key: key.to_string(),
                value: value.to_string(),
                msg: e.to_string(),
            })
        }
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
                self.sample.seed = self.seed;
            }
            "model.num_heads" => self.encoder.num_heads = parse(key, value)?,
            "model.num_layers" => self.encoder.num_layers = parse(key, value)?,
            "model.d_model" => self.encoder.d_model = parse(key, value)?,
            "model.d_k" => self.encoder.d_k = parse(key, value)?,
            "model.d_v" => self.encoder.d_v = parse(key, value)?,
            "model.d_hidden" => self.encoder.d_hidden = parse(key, value)?,
            "model.dropout" => self.encoder.dropout = parse(key, value)?,
            "model.norm" => self.encoder.norm = parse(key, value)?,
            "model.residual" => self.encoder.residual = parse(key, value)?,
            "model.d_f" => self.d_f = parse(key, value)?,
            "model.head" => self.head = parse(key, value)?,
            "model.num_types" => self.num_types = parse(key, value)?,
            "train.objective" => self.train.objective = parse::<Objective>(key, value)?,
            "train.alpha" => self.train.alpha = parse(key, value)?,
            "train.sigma" => {
                self.train.sigma = parse(key, value)?;
                self.sample.sigma = self.train.sigma;
            }
            "train.perturbations" => self.train.perturbations = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, value)?,
            "train.frozen" => {
                self.train.frozen = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "sample.algorithm" => self.sample.algorithm = parse::<Algorithm>(key, value)?,
            "sample.step_size" => self.sample.step_size = parse(key, value)?,
            "sample.steps" => self.sample.steps = parse(key, value)?,
            "sample.samples" => self.sample.samples = parse(key, value)?,
            "sample.prior_max" => {
                self.prior_max = if value == "auto" { None } else { Some(parse(key, value)?) }
            }
            "sample.denoise_scale" => self.sample.denoise_scale = parse::<DenoiseScale>(key, value)?,
            "sample.mirror_correction" => self.sample.mirror_correction = parse(key, value)?,
            "eval.levels" => {
                let levels = value
                    .split(',')
                    .map(|s| parse::<f64>(key, s.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                self.eval = QuantileGrid::new(levels).map_err(|e| ConfigError::BadValue {
                    line: 0,
                    key: key.into(),
                    value: value.into(),
                    msg: e.to_string(),
                })?;
            }
            "data.train" => self.data.train = path(value),
            "data.dev" => self.data.dev = path(value),
            "data.test" => self.data.test = path(value),
            "data.normalizer" => self.data.normalizer = parse(key, value)?,
            "data.scale" => self.data.scale = parse(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Every key in a fixed order; [`RunConfig::from_text`] reads it back.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let t = &self.train;
        let s = &self.sample;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let levels: Vec<String> = self.eval.levels().iter().map(|q| format!("{q:?}")).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("model.num_heads", e.num_heads.to_string());
        kv("model.num_layers", e.num_layers.to_string());
        kv("model.d_model", e.d_model.to_string());
        kv("model.d_k", e.d_k.to_string());
        kv("model.d_v", e.d_v.to_string());
        kv("model.d_hidden", e.d_hidden.to_string());
        kv("model.dropout", format!("{:?}", e.dropout));
        kv("model.norm", e.norm.to_string());
        kv("model.residual", e.residual.to_string());
        kv("model.d_f", self.d_f.to_string());
        kv("model.head", self.head.to_string());
        kv("model.num_types", self.num_types.to_string());
        kv("train.objective", t.objective.to_string());
        kv("train.alpha", format!("{:?}", t.alpha));
        kv("train.sigma", format!("{:?}", t.sigma));
        kv("train.perturbations", t.perturbations.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.epochs", t.epochs.to_string());
        kv("train.clip_norm", format!("{:?}", t.clip_norm));
        kv("train.frozen", t.frozen.join(","));
        kv("sample.algorithm", s.algorithm.to_string());
        kv("sample.step_size", format!("{:?}", s.step_size));
        kv("sample.steps", s.steps.to_string());
        kv("sample.samples", s.samples.to_string());
        kv(
            "sample.prior_max",
            self.prior_max.map_or_else(|| "auto".to_string(), |p| format!("{p:?}")),
        );
        kv("sample.denoise_scale", s.denoise_scale.to_string());
        kv("sample.mirror_correction", s.mirror_correction.to_string());
        kv("eval.levels", levels.join(","));
        kv("data.train", path(&self.data.train));
        kv("data.dev", path(&self.data.dev));
        kv("data.test", path(&self.data.test));
        kv("data.normalizer", self.data.normalizer.to_string());
        kv("data.scale", self.data.scale.to_string());
        out
    }
}
