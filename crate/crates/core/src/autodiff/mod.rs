//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built eagerly: each operation evaluates immediately and
//! records what it needs for the backward sweep. Graphs are cheap to build,
//! so training constructs one per sequence and throws it away afterwards.
//!
//! Randomness never lives inside the graph. Dropout, for instance, is passed in
//! as an explicit pre-scaled Bernoulli mask, so a forward pass is a pure
//! function of its inputs.

mod array;
mod graph;

pub use array::Array;
pub use graph::{sigmoid, softplus, Gradients, Graph, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward needs a scalar output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("array of {rows}x{cols} cannot hold {len} values")]
    BadData { rows: usize, cols: usize, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
}

/// Compares reverse-mode gradients of a scalar function with central finite
/// differences and returns `max |analytic - numeric| / (|numeric| + 1e-8)`
/// over every coordinate of every input.
///
/// `build` receives a fresh graph together with the differentiable inputs (in
/// the order given) and must return the scalar output node.
pub fn finite_diff_check<F>(inputs: &[(String, Array)], step: f64, build: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let eval = |arrays: &[Array]| -> Result<(Graph, Vec<Var>, Var), AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(arrays)
            .map(|((name, _), a)| g.input(name.clone(), a.clone()))
            .collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let base: Vec<Array> = inputs.iter().map(|(_, a)| a.clone()).collect();
    let (g, vars, out) = eval(&base)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Array::zeros(base[k].rows(), base[k].cols()));
        for i in 0..base[k].len() {
            let x0 = base[k].data()[i];
            probe[k].data_mut()[i] = x0 + step;
            let (gp, _, op) = eval(&probe)?;
            let fp = gp.value(op).item();
            probe[k].data_mut()[i] = x0 - step;
            let (gm, _, om) = eval(&probe)?;
            let fm = gm.value(om).item();
            probe[k].data_mut()[i] = x0;

            let numeric = (fp - fm) / (2.0 * step);
            let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
