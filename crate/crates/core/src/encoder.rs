//! Causal self-attention encoder over event histories.
//!
//! Each event is embedded as `temporal_encode(clock) + type_embedding[k]` and
//! passed through a stack of masked multi-head attention and position-wise
//! feed-forward sublayers. Row `j` of the output only sees events `0..=j`.

use crate::autodiff::{Array, AutodiffError, Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("d_model must be even for the temporal encoding, got {0}")]
    OddModelDim(usize),
    #[error("event type {k} outside 0..{num_types}")]
    TypeOutOfRange { k: usize, num_types: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Where layer normalisation sits relative to each residual sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormPlacement {
    Pre,
    Post,
    None,
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pre => "pre",
            Self::Post => "post",
            Self::None => "none",
        })
    }
}

impl FromStr for NormPlacement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre" => Ok(Self::Pre),
            "post" => Ok(Self::Post),
            "none" => Ok(Self::None),
            other => Err(format!("unknown norm placement `{other}` (pre|post|none)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_heads: usize,
    pub num_layers: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_hidden: usize,
    pub dropout: f64,
    pub norm: NormPlacement,
    pub residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_heads: 4,
            num_layers: 4,
            d_model: 64,
            d_k: 16,
            d_v: 16,
            d_hidden: 256,
            dropout: 0.1,
            norm: NormPlacement::Pre,
            residual: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !self.d_model.is_multiple_of(2) {
            return Err(EncoderError::OddModelDim(self.d_model));
        }
        let positive = [
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_hidden", self.d_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `(name, rows, cols)` of every encoder parameter.
    pub fn param_shapes(&self, num_types: usize) -> Vec<(String, usize, usize)> {
        let d = self.d_model;
        let mut out = vec![("embed.type".to_string(), num_types, d)];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("attn.wq"), d, self.num_heads * self.d_k),
                (p("attn.wk"), d, self.num_heads * self.d_k),
                (p("attn.wv"), d, self.num_heads * self.d_v),
                (p("attn.wo"), self.num_heads * self.d_v, d),
                (p("ffn.w1"), d, self.d_hidden),
                (p("ffn.b1"), 1, self.d_hidden),
                (p("ffn.w2"), self.d_hidden, d),
                (p("ffn.b2"), 1, d),
            ]);
            if self.norm != NormPlacement::None {
                out.extend([
                    (p("ln1.gain"), 1, d),
                    (p("ln1.bias"), 1, d),
                    (p("ln2.gain"), 1, d),
                    (p("ln2.bias"), 1, d),
                ]);
            }
        }
        if self.norm == NormPlacement::Pre {
            out.push(("final_ln.gain".into(), 1, d));
            out.push(("final_ln.bias".into(), 1, d));
        }
        out
    }
}

/// Sinusoidal encoding: column `2m` is `sin(t / 10000^(2m/d))`, column `2m+1` the cosine.
pub fn temporal_encode(times: &[f64], d_model: usize) -> Result<Array, EncoderError> {
    if !d_model.is_multiple_of(2) {
        return Err(EncoderError::OddModelDim(d_model));
    }
    let freqs: Vec<f64> = (0..d_model / 2)
        .map(|m| 10000f64.powf(-((2 * m) as f64) / d_model as f64))
        .collect();
    Ok(Array::from_fn(times.len(), d_model, |i, c| {
        let arg = times[i] * freqs[c / 2];
        if c % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    }))
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1: Option<LayerNormVars>,
    pub ln2: Option<LayerNormVars>,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub type_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_ln: Option<LayerNormVars>,
}

impl EncoderVars {
    /// Resolves every encoder parameter through `lookup`.
    pub fn bind<E>(config: &EncoderConfig, mut lookup: impl FnMut(&str) -> Result<Var, E>) -> Result<Self, E> {
        let mut layers = Vec::with_capacity(config.num_layers);
        let with_norm = config.norm != NormPlacement::None;
        for l in 0..config.num_layers {
            let mut get = |s: &str| lookup(&format!("layer{l}.{s}"));
            let wq = get("attn.wq")?;
            let wk = get("attn.wk")?;
            let wv = get("attn.wv")?;
            let wo = get("attn.wo")?;
            let ffn_w1 = get("ffn.w1")?;
            let ffn_b1 = get("ffn.b1")?;
            let ffn_w2 = get("ffn.w2")?;
            let ffn_b2 = get("ffn.b2")?;
            let (ln1, ln2) = if with_norm {
                let ln1 = LayerNormVars {
                    gain: get("ln1.gain")?,
                    bias: get("ln1.bias")?,
                };
                let ln2 = LayerNormVars {
                    gain: get("ln2.gain")?,
                    bias: get("ln2.bias")?,
                };
                (Some(ln1), Some(ln2))
            } else {
                (None, None)
            };
            layers.push(LayerVars {
                wq,
                wk,
                wv,
                wo,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln1,
                ln2,
            });
        }
        let final_ln = if config.norm == NormPlacement::Pre {
            Some(LayerNormVars {
                gain: lookup("final_ln.gain")?,
                bias: lookup("final_ln.bias")?,
            })
        } else {
            None
        };
        Ok(Self {
            type_embedding: lookup("embed.type")?,
            layers,
            final_ln,
        })
    }
}

/// Inverted-dropout masks, two per layer (attention and feed-forward outputs).
/// Empty in evaluation mode.
#[derive(Debug, Clone, Default)]
pub struct DropoutMasks {
    masks: Vec<Array>,
}

impl DropoutMasks {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(config: &EncoderConfig, len: usize, rng: &mut R) -> Self {
        if config.dropout == 0.0 {
            return Self::none();
        }
        let keep = 1.0 - config.dropout;
        let masks = (0..2 * config.num_layers)
            .map(|_| {
                Array::from_fn(len, config.d_model, |_, _| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        Self { masks }
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    fn get(&self, index: usize) -> Option<&Array> {
        self.masks.get(index)
    }
}

fn layer_norm(g: &mut Graph, x: Var, ln: LayerNormVars) -> Result<Var, AutodiffError> {
    let n = g.layer_norm_rows(x, LAYER_NORM_EPS)?;
    let scaled = g.mul_row(n, ln.gain)?;
    g.add_row(scaled, ln.bias)
}

fn apply_mask(g: &mut Graph, x: Var, mask: Option<&Array>) -> Result<Var, AutodiffError> {
    match mask {
        Some(m) => {
            let m = g.constant(m.clone());
            g.mul(x, m)
        }
        None => Ok(x),
    }
}

/// `mask[i * len + j]` is true when position `i` may not attend to `j`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|ij| ij % len > ij / len).collect()
}

/// Masked multi-head attention. Returns the projected output and each head's
/// attention weights (`L x L`).
pub fn attention_layer(
    g: &mut Graph,
    x: Var,
    layer: &LayerVars,
    config: &EncoderConfig,
) -> Result<(Var, Vec<Var>), AutodiffError> {
    let len = g.value(x).rows();
    let mask = causal_mask(len);
    let q = g.matmul(x, layer.wq)?;
    let k = g.matmul(x, layer.wk)?;
    let v = g.matmul(x, layer.wv)?;
    let scale = 1.0 / (config.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    let mut weights = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = g.slice_cols(q, h * config.d_k, (h + 1) * config.d_k)?;
        let kh = g.slice_cols(k, h * config.d_k, (h + 1) * config.d_k)?;
        let vh = g.slice_cols(v, h * config.d_v, (h + 1) * config.d_v)?;
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.affine(logits, scale, 0.0)?;
        let logits = g.masked_fill(logits, &mask, f64::NEG_INFINITY)?;
        let w = g.softmax_rows(logits)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = g.concat_cols(&heads)?;
    Ok((g.matmul(cat, layer.wo)?, weights))
}

fn feed_forward(g: &mut Graph, x: Var, layer: &LayerVars) -> Result<Var, AutodiffError> {
    let hid = g.matmul(x, layer.ffn_w1)?;
    let hid = g.add_row(hid, layer.ffn_b1)?;
    let hid = g.relu(hid)?;
    let out = g.matmul(hid, layer.ffn_w2)?;
    g.add_row(out, layer.ffn_b2)
}

/// Embeds one sequence and runs the full stack; returns `L x d_model` hidden states.
pub fn encode(
    g: &mut Graph,
    vars: &EncoderVars,
    config: &EncoderConfig,
    clock: &[f64],
    types: &[usize],
    masks: &DropoutMasks,
) -> Result<Var, EncoderError> {
    let num_types = g.value(vars.type_embedding).rows();
    if let Some(&k) = types.iter().find(|&&k| k >= num_types) {
        return Err(EncoderError::TypeOutOfRange { k, num_types });
    }
    let pos = g.constant(temporal_encode(clock, config.d_model)?);
    let emb = g.gather_rows(vars.type_embedding, types)?;
    let mut x = g.add(pos, emb)?;
    let residual = |g: &mut Graph, base: Var, update: Var| -> Result<Var, AutodiffError> {
        if config.residual {
            g.add(base, update)
        } else {
            Ok(update)
        }
    };
    for (l, layer) in vars.layers.iter().enumerate() {
        let (m_attn, m_ffn) = (masks.get(2 * l), masks.get(2 * l + 1));
        match (config.norm, layer.ln1, layer.ln2) {
            (NormPlacement::Pre, Some(ln1), Some(ln2)) => {
                let n = layer_norm(g, x, ln1)?;
                let (a, _) = attention_layer(g, n, layer, config)?;
                let a = apply_mask(g, a, m_attn)?;
                x = residual(g, x, a)?;
                let n = layer_norm(g, x, ln2)?;
                let f = feed_forward(g, n, layer)?;
                let f = apply_mask(g, f, m_ffn)?;
                x = residual(g, x, f)?;
            }
            (NormPlacement::Post, Some(ln1), Some(ln2)) => {
                let (a, _) = attention_layer(g, x, layer, config)?;
                let a = apply_mask(g, a, m_attn)?;
                let r = residual(g, x, a)?;
                x = layer_norm(g, r, ln1)?;
                let f = feed_forward(g, x, layer)?;
                let f = apply_mask(g, f, m_ffn)?;
                let r = residual(g, x, f)?;
                x = layer_norm(g, r, ln2)?;
            }
            _ => {
                let (a, _) = attention_layer(g, x, layer, config)?;
                let a = apply_mask(g, a, m_attn)?;
                x = residual(g, x, a)?;
                let f = feed_forward(g, x, layer)?;
                let f = apply_mask(g, f, m_ffn)?;
                x = residual(g, x, f)?;
            }
        }
    }
    if let Some(ln) = vars.final_ln {
        x = layer_norm(g, x, ln)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::collections::BTreeMap;

    fn small(norm: NormPlacement) -> EncoderConfig {
        EncoderConfig {
            num_heads: 2,
            num_layers: 2,
            d_model: 8,
            d_k: 4,
            d_v: 3,
            d_hidden: 6,
            dropout: 0.0,
            norm,
            residual: true,
        }
    }

    fn random_params(cfg: &EncoderConfig, m: usize, seed: u64) -> BTreeMap<String, Array> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.param_shapes(m)
            .into_iter()
            .map(|(n, r, c)| {
                let a = Array::from_fn(r, c, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); 0.4 * z });
                (n, a)
            })
            .collect()
    }

    fn run(cfg: &EncoderConfig, params: &BTreeMap<String, Array>, clock: &[f64], types: &[usize]) -> Array {
        let mut g = Graph::new();
        let vars = EncoderVars::bind(cfg, |n| Ok::<_, ()>(g.constant(params[n].clone()))).unwrap();
        let h = encode(&mut g, &vars, cfg, clock, types, &DropoutMasks::none()).unwrap();
        g.value(h).clone()
    }

    #[test]
    fn temporal_encoding_at_zero_alternates() {
        let e = temporal_encode(&[0.0], 6).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn temporal_encoding_first_column() {
        let e = temporal_encode(&[std::f64::consts::PI], 4).unwrap();
        assert!(e.get(0, 0).abs() < 1e-12);
        assert!((e.get(0, 1) + 1.0).abs() < 1e-12);
        assert_eq!(e, temporal_encode(&[std::f64::consts::PI], 4).unwrap());
        assert!(matches!(temporal_encode(&[1.0], 5), Err(EncoderError::OddModelDim(5))));
    }

    #[test]
    fn single_event_attends_to_itself() {
        let cfg = small(NormPlacement::None);
        let params = random_params(&cfg, 2, 1);
        let mut g = Graph::new();
        let vars = EncoderVars::bind(&cfg, |n| Ok::<_, ()>(g.constant(params[n].clone()))).unwrap();
        let x = g.constant(Array::from_fn(1, 8, |_, c| c as f64 * 0.1));
        let (out, weights) = attention_layer(&mut g, x, &vars.layers[0], &cfg).unwrap();
        for w in &weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        let xv = g.value(x).clone();
        let v = xv.matmul(&params["layer0.attn.wv"]);
        let expected = v.matmul(&params["layer0.attn.wo"]);
        for (a, b) in g.value(out).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_split_attention_evenly() {
        let cfg = small(NormPlacement::None);
        let params = random_params(&cfg, 2, 2);
        let mut g = Graph::new();
        let vars = EncoderVars::bind(&cfg, |n| Ok::<_, ()>(g.constant(params[n].clone()))).unwrap();
        let x = g.constant(Array::from_fn(2, 8, |_, c| (c as f64).sin()));
        let (_, weights) = attention_layer(&mut g, x, &vars.layers[0], &cfg).unwrap();
        for w in &weights {
            let w = g.value(*w);
            assert_eq!(w.get(0, 1), 0.0);
            assert!((w.get(1, 0) - 0.5).abs() < 1e-12 && (w.get(1, 1) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small(NormPlacement::None);
        let params = random_params(&cfg, 2, 3);
        let mut g = Graph::new();
        let vars = EncoderVars::bind(&cfg, |n| Ok::<_, ()>(g.constant(params[n].clone()))).unwrap();
        let x = g.constant(Array::from_fn(5, 8, |r, c| ((r * 8 + c) as f64).cos()));
        let (_, weights) = attention_layer(&mut g, x, &vars.layers[0], &cfg).unwrap();
        for w in &weights {
            let w = g.value(*w);
            for r in 0..5 {
                assert!((w.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.row_slice(r)[r + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn causality_under_perturbation() {
        for norm in [NormPlacement::Pre, NormPlacement::Post, NormPlacement::None] {
            let cfg = small(norm);
            let params = random_params(&cfg, 3, 4);
            let clock = [0.3, 0.9, 1.4, 2.2, 3.0];
            let types = [0, 2, 1, 1, 0];
            let base = run(&cfg, &params, &clock, &types);
            for j in 0..5 {
                let mut c2 = clock;
                c2[j] += 0.7;
                let mut t2 = types;
                t2[j] = (t2[j] + 1) % 3;
                let out = run(&cfg, &params, &c2, &t2);
                for r in 0..5 {
                    let same = base.row_slice(r) == out.row_slice(r);
                    assert_eq!(same, r < j, "norm {norm}, perturbed {j}, row {r}");
                }
            }
        }
    }

    #[test]
    fn zero_params_yield_last_bias_path() {
        // with every weight zero the sublayers vanish and the residual stream is
        // the embedding itself (no norm) plus the last FFN bias
        let cfg = small(NormPlacement::None);
        let mut params: BTreeMap<String, Array> = cfg
            .param_shapes(2)
            .into_iter()
            .map(|(n, r, c)| (n, Array::zeros(r, c)))
            .collect();
        params.insert("layer1.ffn.b2".into(), Array::row((0..8).map(|c| c as f64).collect()));
        let clock = [0.5, 1.0];
        let out = run(&cfg, &params, &clock, &[0, 1]);
        let pos = temporal_encode(&clock, 8).unwrap();
        for r in 0..2 {
            for c in 0..8 {
                assert!((out.get(r, c) - (pos.get(r, c) + c as f64)).abs() < 1e-12);
            }
        }
        let no_res = EncoderConfig {
            residual: false,
            ..cfg.clone()
        };
        let out = run(&no_res, &params, &clock, &[0, 1]);
        for r in 0..2 {
            assert_eq!(out.row_slice(r), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        }
    }

    #[test]
    fn evaluation_is_bitwise_deterministic() {
        let cfg = small(NormPlacement::Pre);
        let params = random_params(&cfg, 2, 5);
        let a = run(&cfg, &params, &[0.1, 0.5, 0.7], &[1, 0, 1]);
        let b = run(&cfg, &params, &[0.1, 0.5, 0.7], &[1, 0, 1]);
        assert_eq!(a, b);
    }

    #[test]
    fn type_out_of_range() {
        let cfg = small(NormPlacement::Pre);
        let params = random_params(&cfg, 2, 6);
        let mut g = Graph::new();
        let vars = EncoderVars::bind(&cfg, |n| Ok::<_, ()>(g.constant(params[n].clone()))).unwrap();
        let err = encode(&mut g, &vars, &cfg, &[0.1], &[2], &DropoutMasks::none()).unwrap_err();
        assert!(matches!(err, EncoderError::TypeOutOfRange { k: 2, num_types: 2 }));
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        for norm in [NormPlacement::Pre, NormPlacement::Post] {
            let cfg = small(norm);
            let params = random_params(&cfg, 3, 7);
            let inputs: Vec<(String, Array)> = params.clone().into_iter().collect();
            let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
            let weights = Array::from_fn(4, 8, |r, c| ((r + 2 * c) as f64 * 0.37).sin());
            let err = finite_diff_check(&inputs, 1e-4, |g, vars| {
                let map: BTreeMap<&str, Var> = names.iter().map(String::as_str).zip(vars.iter().copied()).collect();
                let ev = EncoderVars::bind(&cfg, |n| Ok(map[n])).map_err(|e: AutodiffError| e)?;
                let h = encode(g, &ev, &cfg, &[0.2, 0.6, 1.1, 1.3], &[0, 2, 1, 2], &DropoutMasks::none())
                    .map_err(|e| match e {
                        EncoderError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    })?;
                let w = g.constant(weights.clone());
                let p = g.mul(h, w)?;
                g.sum(p)
            })
            .unwrap();
            assert!(err < 1e-4, "norm {norm}: {err}");
        }
    }

    #[test]
    fn dropout_masks_scale_kept_units() {
        let cfg = EncoderConfig {
            dropout: 0.25,
            ..small(NormPlacement::Pre)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DropoutMasks::sample(&cfg, 50, &mut rng);
        assert_eq!(m.masks.len(), 4);
        for mask in &m.masks {
            assert!(mask.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        }
        assert!(DropoutMasks::sample(&small(NormPlacement::Pre), 3, &mut rng).is_empty());
    }
}
