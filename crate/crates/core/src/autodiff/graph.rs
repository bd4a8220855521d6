use super::{Array, AutodiffError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    AddScalar(Var, Var),
    Affine { x: Var, scale: f64 },
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    LayerNormRows { x: Var, inv_std: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::AddScalar(..) => "add_scalar",
            Op::Affine { .. } => "affine",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MaskedFill { .. } => "masked_fill",
            Op::LayerNormRows { .. } => "layer_norm_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array,
    name: Option<String>,
    requires_grad: bool,
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Eagerly evaluated computation graph recorded for reverse-mode differentiation.
///
/// Every operation computes its forward value when it is added, so the graph
/// doubles as the cache of forward values needed by [`Graph::backward`].
/// Nodes only ever reference earlier nodes, which keeps the graph acyclic and
/// topologically ordered by construction.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Array> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn check_same(op: &'static str, a: &Array, b: &Array) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Array, b: &Array) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].name.as_deref()
    }

    /// Differentiable named input (a parameter or any array we want gradients for).
    pub fn input(&mut self, name: impl Into<String>, value: Array) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            name: Some(name.into()),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            name: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Array) -> Result<Var, AutodiffError> {
        let node = self.nodes.len();
        let op_name = op.name();
        // masked_fill legitimately carries -inf into a following softmax
        if !matches!(op, Op::MaskedFill { .. }) && !value.is_finite() {
            return Err(AutodiffError::NonFinite { node, op: op_name });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            name: None,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::AddScalar(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softplus(x)
            | Op::Sigmoid(x)
            | Op::SoftmaxRows(x)
            | Op::LogSoftmaxRows(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Affine { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::LayerNormRows { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let out = av.matmul(bv);
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("matmul_t", av, bv));
        }
        let out = av.matmul_t(bv);
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).transpose();
        self.push(Op::Transpose(x), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        check_same("div", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), out)
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(mismatch("add_row", xv, rv));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % n];
        }
        self.push(Op::AddRow(x, row), out)
    }

    /// Multiplies every row of `x` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, AutodiffError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(mismatch("mul_row", xv, rv));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= rv.data()[i % n];
        }
        self.push(Op::MulRow(x, row), out)
    }

    /// Scales row `r` of `x` by entry `r` of an `m x 1` column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, AutodiffError> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.cols() != 1 || cv.rows() != xv.rows() {
            return Err(mismatch("mul_col", xv, cv));
        }
        let mut out = xv.clone();
        let n = xv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= cv.data()[i / n];
        }
        self.push(Op::MulCol(x, col), out)
    }

    /// Adds a `1 x 1` node to every entry.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.shape() != (1, 1) {
            return Err(mismatch("add_scalar", xv, sv));
        }
        let s0 = sv.item();
        let out = xv.map(|v| v + s0);
        self.push(Op::AddScalar(x, s), out)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine { x, scale }, out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), out)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), out)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(f64::ln);
        self.push(Op::Log(x), out)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(softplus);
        self.push(Op::Softplus(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    /// Row-wise softmax. Entries equal to `-inf` receive exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let n = xv.cols();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(Op::SoftmaxRows(x), out)
    }

    /// Row-wise log-softmax via log-sum-exp.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let n = xv.cols();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows(x), out)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        let first = xs.first().ok_or(AutodiffError::Empty("concat_cols"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut out = Array::zeros(rows, cols);
        let mut offset = 0;
        for &x in xs {
            let v = self.value(x);
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        self.push(Op::ConcatCols(xs.to_vec()), out)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: xv.rows(),
            });
        }
        let n = xv.cols();
        let out = Array::from_vec(end - start, n, xv.data()[start * n..end * n].to_vec())?;
        self.push(Op::SliceRows { x, start }, out)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: xv.cols(),
            });
        }
        let out = Array::from_fn(xv.rows(), end - start, |r, c| xv.get(r, start + c));
        self.push(Op::SliceCols { x, start }, out)
    }

    /// Selects rows by index (repeats allowed); the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= xv.rows() {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: xv.rows(),
                });
            }
            data.extend_from_slice(xv.row_slice(i));
        }
        let out = Array::from_vec(index.len(), n, data)?;
        self.push(
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            out,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = Array::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(AutodiffError::Empty("mean"));
        }
        let out = Array::scalar(xv.sum() / xv.len() as f64);
        self.push(Op::Mean(x), out)
    }

    /// Replaces entries where `mask` is true by `value`; masked entries get no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "masked_fill",
                index: mask.len(),
                len: xv.len(),
            });
        }
        let mut out = xv.clone();
        for (v, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *v = value;
            }
        }
        self.push(
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            out,
        )
    }

    /// Normalises every row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(Op::LayerNormRows { x, inv_std }, out)
    }

    /// Reverse-mode sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, AutodiffError> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarOutput {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array::scalar(1.0));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, g: Array) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    self.accumulate(grads, *a, g.matmul_t(val(b)));
                }
                if wants(b) {
                    self.accumulate(grads, *b, val(a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if wants(a) {
                    self.accumulate(grads, *a, g.matmul(val(b)));
                }
                if wants(b) {
                    self.accumulate(grads, *b, g.t_matmul(val(a)));
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    self.accumulate(grads, *a, g.zip_map(val(b), |gv, bv| gv * bv));
                }
                if wants(b) {
                    self.accumulate(grads, *b, g.zip_map(val(a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                if wants(a) {
                    self.accumulate(grads, *a, g.zip_map(val(b), |gv, bv| gv / bv));
                }
                if wants(b) {
                    // d(a/b)/db = -y/b
                    let gb = g.zip_map(y, |gv, yv| gv * yv).zip_map(val(b), |t, bv| -t / bv);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if wants(row) {
                    let n = g.cols();
                    let mut gr = Array::zeros(1, n);
                    for (i, v) in g.data().iter().enumerate() {
                        gr.data_mut()[i % n] += v;
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(x), val(row));
                let n = g.cols();
                if wants(x) {
                    let mut gx = g.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= rv.data()[i % n];
                    }
                    self.accumulate(grads, *x, gx);
                }
                if wants(row) {
                    let mut gr = Array::zeros(1, n);
                    for (i, (gv, xv)) in g.data().iter().zip(xv.data()).enumerate() {
                        gr.data_mut()[i % n] += gv * xv;
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (val(x), val(col));
                let n = g.cols();
                if wants(x) {
                    let mut gx = g.clone();
                    for (i, v) in gx.data_mut().iter_mut().enumerate() {
                        *v *= cv.data()[i / n];
                    }
                    self.accumulate(grads, *x, gx);
                }
                if wants(col) {
                    let mut gc = Array::zeros(cv.rows(), 1);
                    for (i, (gv, xv)) in g.data().iter().zip(xv.data()).enumerate() {
                        gc.data_mut()[i / n] += gv * xv;
                    }
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::AddScalar(x, s) => {
                self.accumulate(grads, *x, g.clone());
                if wants(s) {
                    self.accumulate(grads, *s, Array::scalar(g.sum()));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Tanh(x) => self.accumulate(grads, *x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Relu(x) => self.accumulate(
                grads,
                *x,
                g.zip_map(val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log(x) => self.accumulate(grads, *x, g.zip_map(val(x), |gv, xv| gv / xv)),
            Op::Softplus(x) => {
                self.accumulate(grads, *x, g.zip_map(val(x), |gv, xv| gv * sigmoid(xv)))
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)))
            }
            Op::SoftmaxRows(x) => {
                let n = y.cols().max(1);
                let mut gx = Array::zeros(y.rows(), y.cols());
                for ((gr, yr), out) in g
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(gx.data_mut().chunks_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let n = y.cols().max(1);
                let mut gx = Array::zeros(y.rows(), y.cols());
                for ((gr, yr), out) in g
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(gx.data_mut().chunks_mut(n))
                {
                    let gsum: f64 = gr.iter().sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for x in xs {
                    let w = val(x).cols();
                    if wants(x) {
                        let part = Array::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        self.accumulate(grads, *x, part);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(x);
                let n = xv.cols();
                let mut gx = Array::zeros(xv.rows(), n);
                gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(x);
                let mut gx = Array::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        gx.set(r, start + c, g.get(r, c));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, index } => {
                let xv = val(x);
                let n = xv.cols();
                let mut gx = Array::zeros(xv.rows(), n);
                for (k, &i) in index.iter().enumerate() {
                    let src = &g.data()[k * n..(k + 1) * n];
                    for (d, s) in gx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let xv = val(x);
                self.accumulate(grads, *x, Array::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::Mean(x) => {
                let xv = val(x);
                let s = g.item() / xv.len() as f64;
                self.accumulate(grads, *x, Array::filled(xv.rows(), xv.cols(), s));
            }
            Op::MaskedFill { x, mask } => {
                let mut gx = g.clone();
                for (v, &m) in gx.data_mut().iter_mut().zip(mask) {
                    if m {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = y.cols().max(1);
                let nf = n as f64;
                let mut gx = Array::zeros(y.rows(), y.cols());
                for (((gr, yr), out), is) in g
                    .data()
                    .chunks(n)
                    .zip(y.data().chunks(n))
                    .zip(gx.data_mut().chunks_mut(n))
                    .zip(inv_std)
                {
                    let gmean = gr.iter().sum::<f64>() / nf;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = is * (gv - gmean - yv * gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
