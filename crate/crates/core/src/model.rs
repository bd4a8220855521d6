//! Encoder plus head, with named parameters.

use crate::autodiff::{Array, AutodiffError, Graph, Var};
use crate::data::NormalizedSequence;
use crate::encoder::{encode, DropoutMasks, EncoderConfig, EncoderError, EncoderVars};
use crate::head::{head_param_shapes, EventHead, HeadKind, HeadParams, HeadVars};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use thiserror::Error;

/// Parameters by name; the ordered map fixes iteration (and thus file) order.
pub type ParamMap = BTreeMap<String, Array>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unexpected parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` holds non-finite values")]
    NonFinite(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the intensity head's hidden layer.
    pub d_f: usize,
    pub num_types: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.d_f == 0 {
            return Err(ModelError::Config("d_f must be positive".into()));
        }
        if self.num_types == 0 {
            return Err(ModelError::Config("num_types must be positive".into()));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = self.encoder.param_shapes(self.num_types);
        out.extend(head_param_shapes(self.encoder.d_model, self.d_f, self.num_types));
        out
    }
}

/// Graph handles for every parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamMap,
}

impl Model {
    /// Random initialisation: matrices `N(0, 1/fan_in)`, type embeddings
    /// `N(0, 1)`, biases zero and layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        for (name, rows, cols) in config.param_shapes() {
            let value = if name.ends_with(".gain") {
                Array::ones(rows, cols)
            } else if rows == 1 {
                Array::zeros(rows, cols)
            } else {
                let std = if name == "embed.type" { 1.0 } else { 1.0 / (rows as f64).sqrt() };
                let normal = Normal::new(0.0, std).expect("positive std");
                Array::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
            };
            params.insert(name, value);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names, shapes and finiteness.
    pub fn from_params(config: ModelConfig, params: ParamMap) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.param_shapes();
        for (name, rows, cols) in &shapes {
            let a = params.get(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if a.shape() != (*rows, *cols) {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: (*rows, *cols),
                    got: a.shape(),
                });
            }
            if !a.is_finite() {
                return Err(ModelError::NonFinite(name.clone()));
            }
        }
        if let Some(extra) = params.keys().find(|k| !shapes.iter().any(|(n, _, _)| n == *k)) {
            return Err(ModelError::UnknownParam(extra.clone()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn into_params(self) -> ParamMap {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    pub fn head_params(&self) -> HeadParams {
        let p = |n: &str| self.params[n].clone();
        HeadParams {
            f_w1: p("head.f.w1"),
            f_w2: p("head.f.w2"),
            f_b1: p("head.f.b1"),
            f_w3: p("head.f.w3"),
            f_b2: self.params["head.f.b2"].item(),
            g_w1: p("head.g.w1"),
            g_w2: p("head.g.w2"),
            g_b: p("head.g.b"),
        }
    }

    /// Places every parameter in `g`: as a differentiable input when
    /// `trainable(name)` holds, as a constant otherwise. Returns the handles and
    /// the differentiable `(name, var)` pairs.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> (ModelVars, Vec<(String, Var)>) {
        let mut inputs = Vec::new();
        let mut lookup = |name: &str| -> Result<Var, ModelError> {
            let value = self
                .params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?
                .clone();
            Ok(if trainable(name) {
                let v = g.input(name, value);
                inputs.push((name.to_string(), v));
                v
            } else {
                g.constant(value)
            })
        };
        let encoder = EncoderVars::bind(&self.config.encoder, &mut lookup).expect("validated params");
        let head = HeadVars::bind(&mut lookup).expect("validated params");
        (ModelVars { encoder, head }, inputs)
    }

    /// Evaluation-mode hidden states, one row per event.
    pub fn hidden_states(&self, seq: &NormalizedSequence) -> Result<Array, ModelError> {
        let mut g = Graph::new();
        let (vars, _) = self.bind(&mut g, |_| false);
        let h = encode(
            &mut g,
            &vars.encoder,
            &self.config.encoder,
            &seq.clock,
            &seq.types,
            &DropoutMasks::none(),
        )?;
        Ok(g.value(h).clone())
    }

    /// One head per predictable event `i >= 1`, conditioned on the history up to `i - 1`.
    pub fn event_heads(&self, seq: &NormalizedSequence) -> Result<Vec<EventHead>, ModelError> {
        if seq.len() < 2 {
            return Ok(Vec::new());
        }
        let hidden = self.hidden_states(seq)?;
        let head = self.head_params();
        Ok((0..seq.len() - 1)
            .map(|r| EventHead::new(hidden.row_slice(r), &head, self.config.head))
            .collect())
    }
}
