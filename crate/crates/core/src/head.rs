//! Output heads: total intensity, its score, and the type distribution.
//!
//! For a hidden state `h` and a gap `Δ` the intensity head computes
//!
//! ```text
//! u = (h W1) Δ + h W2 + b1          (d_f)
//! f = tanh(u) · w3 + b2
//! λ = softplus(f)
//! ψ = ∂Δ log λ − λ
//! ```
//!
//! Derivatives in `Δ` are analytic. Writing `a = h W1`, `T = tanh(u)`,
//! `s = sigmoid(f)`:
//!
//! ```text
//! f'  = ((1 − T²) ⊙ a) · w3            λ'  = s f'
//! f'' = (−2T(1 − T²) ⊙ a²) · w3         λ'' = s(1 − s) f'² + s f''
//! ∂Δψ = λ''/λ − (λ'/λ)² − λ'
//! ```
//!
//! The direct-score variant reads `f` itself as the score.

use crate::autodiff::{sigmoid, softplus, Array, AutodiffError, Graph, Var};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How the scalar head output is turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// `f` parametrises the intensity through softplus.
    Intensity,
    /// `f` is the score itself (no positivity constraint).
    DirectScore,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Intensity => "intensity",
            Self::DirectScore => "direct-score",
        })
    }
}

impl FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intensity" => Ok(Self::Intensity),
            "direct-score" | "direct" => Ok(Self::DirectScore),
            other => Err(format!("unknown head `{other}` (intensity|direct-score)")),
        }
    }
}

/// `(name, rows, cols)` of every head parameter.
pub fn head_param_shapes(d_model: usize, d_f: usize, num_types: usize) -> Vec<(String, usize, usize)> {
    vec![
        ("head.f.w1".into(), d_model, d_f),
        ("head.f.w2".into(), d_model, d_f),
        ("head.f.b1".into(), 1, d_f),
        ("head.f.w3".into(), d_f, 1),
        ("head.f.b2".into(), 1, 1),
        ("head.g.w1".into(), d_model, num_types),
        ("head.g.w2".into(), d_model, num_types),
        ("head.g.b".into(), 1, num_types),
    ]
}

/// Head weights as plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub f_w1: Array,
    pub f_w2: Array,
    pub f_b1: Array,
    pub f_w3: Array,
    pub f_b2: f64,
    pub g_w1: Array,
    pub g_w2: Array,
    pub g_b: Array,
}

impl HeadParams {
    pub fn zeros(d_model: usize, d_f: usize, num_types: usize) -> Self {
        Self {
            f_w1: Array::zeros(d_model, d_f),
            f_w2: Array::zeros(d_model, d_f),
            f_b1: Array::zeros(1, d_f),
            f_w3: Array::zeros(d_f, 1),
            f_b2: 0.0,
            g_w1: Array::zeros(d_model, num_types),
            g_w2: Array::zeros(d_model, num_types),
            g_b: Array::zeros(1, num_types),
        }
    }
}

/// `λ`, `ψ` and `∂Δψ` at one gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEval {
    /// NaN for the direct-score head, which has no intensity.
    pub lambda: f64,
    pub psi: f64,
    pub dpsi_dt: f64,
}

/// The head collapsed onto one hidden state: everything needed to evaluate it
/// at any gap without touching `h` again.
#[derive(Debug, Clone, PartialEq)]
pub struct EventHead {
    slope: Vec<f64>,
    offset: Vec<f64>,
    w3: Vec<f64>,
    b2: f64,
    type_slope: Vec<f64>,
    type_offset: Vec<f64>,
    kind: HeadKind,
}

fn row_times(h: &[f64], w: &Array) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &hv) in h.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row_slice(r)) {
            *o += hv * wv;
        }
    }
    out
}

impl EventHead {
    pub fn new(h: &[f64], params: &HeadParams, kind: HeadKind) -> Self {
        let slope = row_times(h, &params.f_w1);
        let offset = row_times(h, &params.f_w2)
            .into_iter()
            .zip(params.f_b1.data())
            .map(|(a, b)| a + b)
            .collect();
        let type_slope = row_times(h, &params.g_w1);
        let type_offset = row_times(h, &params.g_w2)
            .into_iter()
            .zip(params.g_b.data())
            .map(|(a, b)| a + b)
            .collect();
        Self {
            slope,
            offset,
            w3: params.f_w3.data().to_vec(),
            b2: params.f_b2,
            type_slope,
            type_offset,
            kind,
        }
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn num_types(&self) -> usize {
        self.type_offset.len()
    }

    /// `(f, f', f'')` at gap `dt`.
    pub fn raw(&self, dt: f64) -> (f64, f64, f64) {
        let (mut f, mut fp, mut fpp) = (self.b2, 0.0, 0.0);
        for ((&a, &c), &w) in self.slope.iter().zip(&self.offset).zip(&self.w3) {
            let t = (a * dt + c).tanh();
            let d = 1.0 - t * t;
            f += t * w;
            fp += d * a * w;
            fpp += -2.0 * t * d * a * a * w;
        }
        (f, fp, fpp)
    }

    /// Total intensity (intensity head only; the direct head has none).
    pub fn intensity(&self, dt: f64) -> f64 {
        softplus(self.raw(dt).0)
    }

    pub fn eval(&self, dt: f64) -> ScoreEval {
        let (f, fp, fpp) = self.raw(dt);
        match self.kind {
            HeadKind::Intensity => {
                let lambda = softplus(f);
                let s = sigmoid(f);
                let lp = s * fp;
                let lpp = s * (1.0 - s) * fp * fp + s * fpp;
                let ratio = lp / lambda;
                ScoreEval {
                    lambda,
                    psi: ratio - lambda,
                    dpsi_dt: lpp / lambda - ratio * ratio - lp,
                }
            }
            HeadKind::DirectScore => ScoreEval {
                lambda: f64::NAN,
                psi: f,
                dpsi_dt: fp,
            },
        }
    }

    /// Score at gap `dt`, skipping the second derivative.
    pub fn score(&self, dt: f64) -> f64 {
        match self.kind {
            HeadKind::Intensity => {
                let mut f = self.b2;
                let mut fp = 0.0;
                for ((&a, &c), &w) in self.slope.iter().zip(&self.offset).zip(&self.w3) {
                    let t = (a * dt + c).tanh();
                    f += t * w;
                    fp += (1.0 - t * t) * a * w;
                }
                let lambda = softplus(f);
                sigmoid(f) * fp / lambda - lambda
            }
            HeadKind::DirectScore => self.raw(dt).0,
        }
    }

    pub fn type_logits(&self, dt: f64) -> Vec<f64> {
        self.type_slope
            .iter()
            .zip(&self.type_offset)
            .map(|(a, c)| a * dt + c)
            .collect()
    }

    /// Softmax over types at gap `dt`.
    pub fn type_distribution(&self, dt: f64) -> Vec<f64> {
        let logits = self.type_logits(dt);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// `f(h, Δ)`.
pub fn raw_head(h: &[f64], dt: f64, params: &HeadParams) -> f64 {
    EventHead::new(h, params, HeadKind::Intensity).raw(dt).0
}

/// `softplus(f(h, Δ))`.
pub fn intensity(h: &[f64], dt: f64, params: &HeadParams) -> f64 {
    EventHead::new(h, params, HeadKind::Intensity).intensity(dt)
}

/// `ψ(h, Δ) = ∂Δ log λ − λ`.
pub fn score(h: &[f64], dt: f64, params: &HeadParams) -> f64 {
    EventHead::new(h, params, HeadKind::Intensity).score(dt)
}

/// `∂Δψ(h, Δ)`.
pub fn score_time_derivative(h: &[f64], dt: f64, params: &HeadParams) -> f64 {
    EventHead::new(h, params, HeadKind::Intensity).eval(dt).dpsi_dt
}

/// Score of the direct-score ablation: `f` itself.
pub fn direct_score_head(h: &[f64], dt: f64, params: &HeadParams) -> f64 {
    EventHead::new(h, params, HeadKind::DirectScore).score(dt)
}

pub fn type_distribution(h: &[f64], dt: f64, params: &HeadParams) -> Vec<f64> {
    EventHead::new(h, params, HeadKind::Intensity).type_distribution(dt)
}

/// Head parameters inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub f_w1: Var,
    pub f_w2: Var,
    pub f_b1: Var,
    pub f_w3: Var,
    pub f_b2: Var,
    pub g_w1: Var,
    pub g_w2: Var,
    pub g_b: Var,
}

impl HeadVars {
    pub fn bind<E>(mut lookup: impl FnMut(&str) -> Result<Var, E>) -> Result<Self, E> {
        Ok(Self {
            f_w1: lookup("head.f.w1")?,
            f_w2: lookup("head.f.w2")?,
            f_b1: lookup("head.f.b1")?,
            f_w3: lookup("head.f.w3")?,
            f_b2: lookup("head.f.b2")?,
            g_w1: lookup("head.g.w1")?,
            g_w2: lookup("head.g.w2")?,
            g_b: lookup("head.g.b")?,
        })
    }
}

/// Graph nodes for the score at many (hidden state, gap) pairs.
#[derive(Debug, Clone, Copy)]
pub struct GraphScore {
    /// `R x 1`.
    pub psi: Var,
    /// `R x 1`, present when requested.
    pub dpsi_dt: Option<Var>,
}

/// Evaluates the score head in a graph.
///
/// `hidden` holds one hidden state per row; `expand[r]` picks the hidden row
/// used for output row `r`, so many gaps can share one state without
/// repeating the `h W` products. `gaps` is the `R x 1` column of gaps.
pub fn graph_score(
    g: &mut Graph,
    vars: &HeadVars,
    kind: HeadKind,
    hidden: Var,
    expand: &[usize],
    gaps: &Array,
    with_derivative: bool,
) -> Result<GraphScore, AutodiffError> {
    let a = g.matmul(hidden, vars.f_w1)?;
    let c = g.matmul(hidden, vars.f_w2)?;
    let c = g.add_row(c, vars.f_b1)?;
    let a = g.gather_rows(a, expand)?;
    let c = g.gather_rows(c, expand)?;
    let dt = g.constant(gaps.clone());
    let u = g.mul_col(a, dt)?;
    let u = g.add(u, c)?;
    let t = g.tanh(u)?;
    let f = g.matmul(t, vars.f_w3)?;
    let f = g.add_scalar(f, vars.f_b2)?;
    let t2 = g.mul(t, t)?;
    let sech2 = g.affine(t2, -1.0, 1.0)?;
    let da = g.mul(sech2, a)?;
    let fp = g.matmul(da, vars.f_w3)?;
    if kind == HeadKind::DirectScore {
        return Ok(GraphScore {
            psi: f,
            dpsi_dt: with_derivative.then_some(fp),
        });
    }
    let lambda = g.softplus(f)?;
    let s = g.sigmoid(f)?;
    let lp = g.mul(s, fp)?;
    let ratio = g.div(lp, lambda)?;
    let psi = g.sub(ratio, lambda)?;
    if !with_derivative {
        return Ok(GraphScore { psi, dpsi_dt: None });
    }
    let tsech = g.mul(t, sech2)?;
    let tsech = g.affine(tsech, -2.0, 0.0)?;
    let a2 = g.mul(a, a)?;
    let curv = g.mul(tsech, a2)?;
    let fpp = g.matmul(curv, vars.f_w3)?;
    let one_minus_s = g.affine(s, -1.0, 1.0)?;
    let ss = g.mul(s, one_minus_s)?;
    let fp2 = g.mul(fp, fp)?;
    let lpp = g.mul(ss, fp2)?;
    let sfpp = g.mul(s, fpp)?;
    let lpp = g.add(lpp, sfpp)?;
    let term = g.div(lpp, lambda)?;
    let ratio2 = g.mul(ratio, ratio)?;
    let dpsi = g.sub(term, ratio2)?;
    let dpsi = g.sub(dpsi, lp)?;
    Ok(GraphScore {
        psi,
        dpsi_dt: Some(dpsi),
    })
}

/// `R x M` log-probabilities of the type head at the given gaps.
pub fn graph_type_log_probs(g: &mut Graph, vars: &HeadVars, hidden: Var, gaps: &Array) -> Result<Var, AutodiffError> {
    let slope = g.matmul(hidden, vars.g_w1)?;
    let dt = g.constant(gaps.clone());
    let scaled = g.mul_col(slope, dt)?;
    let offset = g.matmul(hidden, vars.g_w2)?;
    let logits = g.add(scaled, offset)?;
    let logits = g.add_row(logits, vars.g_b)?;
    g.log_softmax_rows(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, d: usize, df: usize, m: usize) -> HeadParams {
        let mut r = |rows, cols| Array::from_fn(rows, cols, |_, _| rng.gen_range(-0.8..0.8));
        HeadParams {
            f_w1: r(d, df),
            f_w2: r(d, df),
            f_b1: r(1, df),
            f_w3: r(df, 1),
            f_b2: 0.3,
            g_w1: r(d, m),
            g_w2: r(d, m),
            g_b: r(1, m),
        }
    }

    fn random_h(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_params() {
        let p = HeadParams::zeros(4, 3, 3);
        let h = [0.5, -0.2, 0.1, 0.9];
        assert_eq!(raw_head(&h, 1.3, &p), 0.0);
        assert!((intensity(&h, 1.3, &p) - 2f64.ln()).abs() < 1e-15);
        assert!((score(&h, 1.3, &p) + 2f64.ln()).abs() < 1e-15);
        assert_eq!(score_time_derivative(&h, 1.3, &p), 0.0);
        assert_eq!(direct_score_head(&h, 1.3, &p), 0.0);
        for v in type_distribution(&h, 0.7, &p) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_raw_head() {
        let mut p = HeadParams::zeros(2, 1, 2);
        p.f_b1 = Array::row(vec![0.5f64.atanh()]);
        p.f_w3 = Array::column(vec![1.0]);
        assert!((raw_head(&[0.0, 0.0], 2.0, &p) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_output_when_w3_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_params(&mut rng, 4, 3, 2);
        p.f_w3 = Array::zeros(3, 1);
        p.f_b2 = -0.7;
        let h = random_h(&mut rng, 4);
        for dt in [0.0, 0.5, 3.0] {
            assert_eq!(raw_head(&h, dt, &p), -0.7);
            assert_eq!(direct_score_head(&h, dt, &p), -0.7);
        }
    }

    #[test]
    fn time_independent_intensity_has_score_minus_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(&mut rng, 4, 3, 2);
        p.f_w1 = Array::zeros(4, 3);
        let h = random_h(&mut rng, 4);
        let lam = intensity(&h, 0.4, &p);
        assert_eq!(score(&h, 0.4, &p), -lam);
        assert_eq!(score_time_derivative(&h, 0.4, &p), 0.0);
    }

    #[test]
    fn softplus_tail_and_positivity() {
        let mut p = HeadParams::zeros(1, 1, 1);
        p.f_b2 = 50.0;
        assert!((intensity(&[0.0], 0.0, &p) - 50.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p = random_params(&mut rng, 3, 2, 1);
            let h = random_h(&mut rng, 3);
            assert!(intensity(&h, rng.gen_range(-5.0..5.0), &p) > 0.0);
        }
    }

    #[test]
    fn type_bias_dominates() {
        let mut p = HeadParams::zeros(2, 1, 3);
        p.g_b = Array::row(vec![10.0, 0.0, 0.0]);
        let probs = type_distribution(&[0.3, 0.1], 1.0, &p);
        assert!(probs[0] > 0.9999);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = random_params(&mut rng, 3, 2, 5);
            let s: f64 = type_distribution(&random_h(&mut rng, 3), rng.gen_range(0.0..4.0), &p).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let step = 1e-5;
        for _ in 0..100 {
            let p = random_params(&mut rng, 4, 6, 2);
            let h = random_h(&mut rng, 4);
            let head = EventHead::new(&h, &p, HeadKind::Intensity);
            let dt = rng.gen_range(0.01..5.0);
            let (_, fp, fpp) = head.raw(dt);
            let fd1 = (head.raw(dt + step).0 - head.raw(dt - step).0) / (2.0 * step);
            let fd2 = (head.raw(dt + step).1 - head.raw(dt - step).1) / (2.0 * step);
            assert!((fp - fd1).abs() / (fd1.abs() + 1e-8) < 1e-4 || (fp - fd1).abs() < 1e-9);
            assert!((fpp - fd2).abs() / (fd2.abs() + 1e-8) < 1e-4 || (fpp - fd2).abs() < 1e-9);

            let log_lam = |x: f64| head.intensity(x).ln();
            let dlog = (log_lam(dt + step) - log_lam(dt - step)) / (2.0 * step);
            assert!((head.score(dt) - (dlog - head.intensity(dt))).abs() < 1e-5);

            let dpsi = (head.score(dt + step) - head.score(dt - step)) / (2.0 * step);
            let got = head.eval(dt).dpsi_dt;
            assert!((got - dpsi).abs() / (dpsi.abs() + 1e-8) < 1e-4 || (got - dpsi).abs() < 1e-9);
        }
    }

    #[test]
    fn score_depends_only_on_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut rng, 3, 4, 2);
        let h = random_h(&mut rng, 3);
        // shifting both the query time and the last event time leaves the gap unchanged
        let (t_last, t) = (1.2, 2.0);
        let shift = 5.5;
        let a = score(&h, t - t_last, &p);
        let b = score(&h, (t + shift) - (t_last + shift), &p);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn score_accepts_negative_gaps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_params(&mut rng, 3, 4, 2);
        let h = random_h(&mut rng, 3);
        assert!(score(&h, -0.8, &p).is_finite());
    }

    #[test]
    fn graph_matches_scalar_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d, df, m) = (5, 4, 3);
        let p = random_params(&mut rng, d, df, m);
        let hidden = Array::from_fn(2, d, |_, _| rng.gen_range(-1.0..1.0));
        let expand = [0, 0, 1, 1, 1];
        let gaps = Array::column(vec![0.1, 0.9, -0.3, 0.4, 2.0]);
        for kind in [HeadKind::Intensity, HeadKind::DirectScore] {
            let mut g = Graph::new();
            let vars = HeadVars {
                f_w1: g.constant(p.f_w1.clone()),
                f_w2: g.constant(p.f_w2.clone()),
                f_b1: g.constant(p.f_b1.clone()),
                f_w3: g.constant(p.f_w3.clone()),
                f_b2: g.constant(Array::scalar(p.f_b2)),
                g_w1: g.constant(p.g_w1.clone()),
                g_w2: g.constant(p.g_w2.clone()),
                g_b: g.constant(p.g_b.clone()),
            };
            let hv = g.constant(hidden.clone());
            let out = graph_score(&mut g, &vars, kind, hv, &expand, &gaps, true).unwrap();
            for (r, &e) in expand.iter().enumerate() {
                let head = EventHead::new(hidden.row_slice(e), &p, kind);
                let ev = head.eval(gaps.data()[r]);
                assert!((g.value(out.psi).data()[r] - ev.psi).abs() < 1e-12);
                assert!((g.value(out.dpsi_dt.unwrap()).data()[r] - ev.dpsi_dt).abs() < 1e-12);
            }
            let hg = g.constant(Array::from_fn(2, d, |r, c| hidden.get(r, c)));
            let lp = graph_type_log_probs(&mut g, &vars, hg, &Array::column(vec![0.3, 1.7])).unwrap();
            for (r, dt) in [0.3, 1.7].into_iter().enumerate() {
                let probs = EventHead::new(hidden.row_slice(r), &p, kind).type_distribution(dt);
                for k in 0..m {
                    assert!((g.value(lp).get(r, k).exp() - probs[k]).abs() < 1e-12);
                }
            }
        }
    }
}
