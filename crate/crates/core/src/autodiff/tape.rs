//! Define-by-run tape for reverse-mode differentiation.
//!
//! Each primitive computes its value eagerly, checks it is finite and pushes
//! a node holding the value and the input handles. Node indices are the
//! topological order, so [`Tape::backward`] is a single reverse sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColSum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MatMul(Var, Var),
    SqDist(Var, Var),
    Outer(Var, Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    GradReverse(Var, f64),
    Corrupted(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::DivCol(..) => "div_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::ColSum(..) => "col_sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::MatMul(..) => "matmul",
            Op::SqDist(..) => "sq_dist",
            Op::Outer(..) => "outer_rows",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::GradReverse(..) => "grad_reverse",
            Op::Corrupted(..) => "corrupted_identity",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. Build one per step and drop it afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and is
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros of the right shape for
    /// unreachable inputs.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let (n, k) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for j in 0..k {
            let e = ((row[j] - max) / temperature).exp();
            out[i * k + j] = e;
            z += e;
        }
        for j in 0..k {
            out[i * k + j] /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

fn log_softmax_rows(x: &Tensor, temperature: f64) -> Tensor {
    let (n, k) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row
            .iter()
            .map(|&v| ((v - max) / temperature).exp())
            .sum::<f64>()
            .ln();
        for j in 0..k {
            out[i * k + j] = (row[j] - max) / temperature - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// `a (m×k) · b (k×n)`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(|v| self.requires_grad(*v)),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::DivCol(a, b)
            | Op::MatMul(a, b)
            | Op::SqDist(a, b)
            | Op::Outer(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::ColSum(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::GradReverse(a, _)
            | Op::Corrupted(a) => self.requires_grad(*a),
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are only produced for leaves with
    /// `requires_grad` and everything computed from them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × m` (or length-`m`) row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("add_row")?;
        if self.value(row).numel() != m {
            return Err(Error::shape(
                "add_row",
                format!("row of {} values for {m} columns", self.value(row).numel()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..n {
            for j in 0..m {
                out.data_mut()[i * m + j] += r[j];
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("mul_col")?;
        if self.value(col).numel() != n {
            return Err(Error::shape(
                "mul_col",
                format!("column of {} for {n} rows", self.value(col).numel()),
            ));
        }
        let c = self.value(col).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..n {
            for j in 0..m {
                out.data_mut()[i * m + j] *= c[i];
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    /// Divides row `i` of `a` by `col[i]`; `col` must be nonzero.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("div_col")?;
        if self.value(col).numel() != n {
            return Err(Error::shape(
                "div_col",
                format!("column of {} for {n} rows", self.value(col).numel()),
            ));
        }
        let c = self.value(col).data().to_vec();
        if let Some(i) = c.iter().position(|&v| v == 0.0) {
            return Err(Error::domain("div_col", format!("zero divisor at row {i}")));
        }
        let mut out = self.value(a).clone();
        for i in 0..n {
            for j in 0..m {
                out.data_mut()[i * m + j] /= c[i];
            }
        }
        self.push(out, Op::DivCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map(self.value(a), |x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| -x);
        self.push(out, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let out = map(self.value(a), f64::ln);
        self.push(out, Op::Log(a))
    }

    /// `max(eps, a)` elementwise; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = map(self.value(a), |x| x.max(eps));
        self.push(out, Op::ClampMin(a, eps))
    }

    /// `log(max(eps, a))`.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        let c = self.clamp_min(a, eps)?;
        self.log(c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(out, Op::Sigmoid(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("transpose")?;
        let data = transpose_raw(self.value(a).data(), n, m);
        self.push(Tensor::new(vec![m, n], data)?, Op::Transpose(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// `n × m -> n × 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("row_sum")?;
        let d = self.value(a).data();
        let out = (0..n).map(|i| d[i * m..(i + 1) * m].iter().sum()).collect();
        self.push(Tensor::new(vec![n, 1], out)?, Op::RowSum(a))
    }

    /// `n × m -> 1 × m`.
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2("col_sum")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += d[i * m + j];
            }
        }
        self.push(Tensor::new(vec![1, m], out)?, Op::ColSum(a))
    }

    /// Column means, `n × m -> 1 × m`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let (n, _) = self.value(a).dims2("col_mean")?;
        if n == 0 {
            return Err(Error::shape("col_mean", "no rows"));
        }
        let s = self.col_sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, m) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != m {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {m} vs {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(vec![rows, m], data)?,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (n, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {n} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::new(vec![n, total], data)?,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} vs {k2}"),
            ));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b))
    }

    /// Pairwise squared Euclidean distances between rows: `n × d, m × d -> n × m`.
    pub fn sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("sq_dist")?;
        let (m, d2) = self.value(y).dims2("sq_dist")?;
        if d != d2 {
            return Err(Error::shape(
                "sq_dist",
                format!("feature dimensions {d} vs {d2}"),
            ));
        }
        let (xv, yv) = (self.value(x), self.value(y));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xi = xv.row(i);
            for j in 0..m {
                out[i * m + j] = xi
                    .iter()
                    .zip(yv.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::SqDist(x, y))
    }

    /// Row-wise outer product: row `i` of the result is `flatten(f_i g_iᵀ)`,
    /// entry `p·k + q` holding `f[i,p]·g[i,q]`.
    pub fn outer_rows(&mut self, f: Var, g: Var) -> Result<Var> {
        let (n, df) = self.value(f).dims2("outer_rows")?;
        let (n2, k) = self.value(g).dims2("outer_rows")?;
        if n != n2 {
            return Err(Error::shape(
                "outer_rows",
                format!("batch sizes {n} vs {n2}"),
            ));
        }
        let (fv, gv) = (self.value(f), self.value(g));
        let mut out = Vec::with_capacity(n * df * k);
        for i in 0..n {
            for &fp in fv.row(i) {
                out.extend(gv.row(i).iter().map(|&gq| fp * gq));
            }
        }
        self.push(Tensor::new(vec![n, df * k], out)?, Op::Outer(f, g))
    }

    /// Row softmax of `logits / temperature`, stabilized by row-max subtraction.
    pub fn softmax(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        self.value(logits).dims2("softmax")?;
        let out = softmax_rows(self.value(logits), temperature);
        self.push(out, Op::Softmax(logits, temperature))
    }

    pub fn log_softmax(&mut self, logits: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        self.value(logits).dims2("log_softmax")?;
        let out = log_softmax_rows(self.value(logits), temperature);
        self.push(out, Op::LogSoftmax(logits, temperature))
    }

    /// Identity forward; the backward pass multiplies the incoming gradient
    /// by `-scale`.
    pub fn grad_reverse(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::param(format!(
                "gradient reversal scale must be non-negative, got {scale}"
            )));
        }
        let out = self.value(x).clone();
        self.push(out, Op::GradReverse(x, scale))
    }

    /// Identity whose backward rule is deliberately wrong (halves the
    /// gradient). Negative control for gradient checking only.
    #[doc(hidden)]
    pub fn corrupted_identity(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::Corrupted(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} (node {idx}): {bad}",
                    node.op.name()
                )));
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|g| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let m = out.cols();
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
                self.accumulate(grads, *row, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % m] += gv;
                    }
                });
            }
            Op::MulCol(a, col) => {
                let m = out.cols();
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                self.accumulate(grads, *a, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k] += gv * cv[k / m];
                    }
                });
                self.accumulate(grads, *col, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k / m] += gv * av[k];
                    }
                });
            }
            Op::DivCol(a, col) => {
                let m = out.cols();
                let cv = self.value(*col).data();
                let ov = out.data();
                self.accumulate(grads, *a, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k] += gv / cv[k / m];
                    }
                });
                self.accumulate(grads, *col, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k / m] -= gv * ov[k] / cv[k / m];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)
                });
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g)
                });
            }
            Op::Neg(a) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g)
                });
            }
            Op::Exp(a) => {
                let ov = out.data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ov[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / av[i];
                    }
                });
            }
            Op::ClampMin(a, eps) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if av[i] > *eps {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let ov = out.data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * ov[i] * (1.0 - ov[i]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (out.rows(), out.cols());
                let gt = transpose_raw(g, n, m);
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(&gt).for_each(|(s, g)| *s += g)
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::RowSum(a) => {
                let m = self.value(*a).cols();
                self.accumulate(grads, *a, |s| {
                    for (k, s) in s.iter_mut().enumerate() {
                        *s += g[k / m];
                    }
                });
            }
            Op::ColSum(a) => {
                let m = self.value(*a).cols();
                self.accumulate(grads, *a, |s| {
                    for (k, s) in s.iter_mut().enumerate() {
                        *s += g[k % m];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &g[offset..offset + len];
                    self.accumulate(grads, p, |s| {
                        s.iter_mut().zip(slice).for_each(|(s, g)| *s += g)
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col0 = 0;
                for &p in parts {
                    let (n, w) = (self.value(p).rows(), self.value(p).cols());
                    self.accumulate(grads, p, |s| {
                        for i in 0..n {
                            for j in 0..w {
                                s[i * w + j] += g[i * total + col0 + j];
                            }
                        }
                    });
                    col0 += w;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(grads, *a, |s| {
                        s.iter_mut().zip(&da).for_each(|(s, g)| *s += g)
                    });
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(grads, *b, |s| {
                        s.iter_mut().zip(&db).for_each(|(s, g)| *s += g)
                    });
                }
            }
            Op::SqDist(x, y) => {
                let (xv, yv) = (self.value(*x), self.value(*y));
                let (n, d) = (xv.rows(), xv.cols());
                let m = yv.rows();
                self.accumulate(grads, *x, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                s[i * d + t] += gij * (xv.data()[i * d + t] - yv.data()[j * d + t]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *y, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            let gij = 2.0 * g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                s[j * d + t] -= gij * (xv.data()[i * d + t] - yv.data()[j * d + t]);
                            }
                        }
                    }
                });
            }
            Op::Outer(f, gg) => {
                let (fv, gv) = (self.value(*f), self.value(*gg));
                let (n, df) = (fv.rows(), fv.cols());
                let k = gv.cols();
                let w = df * k;
                self.accumulate(grads, *f, |s| {
                    for i in 0..n {
                        for p in 0..df {
                            let mut acc = 0.0;
                            for q in 0..k {
                                acc += g[i * w + p * k + q] * gv.data()[i * k + q];
                            }
                            s[i * df + p] += acc;
                        }
                    }
                });
                self.accumulate(grads, *gg, |s| {
                    for i in 0..n {
                        for q in 0..k {
                            let mut acc = 0.0;
                            for p in 0..df {
                                acc += g[i * w + p * k + q] * fv.data()[i * df + p];
                            }
                            s[i * k + q] += acc;
                        }
                    }
                });
            }
            Op::Softmax(a, t) => {
                let (n, k) = (out.rows(), out.cols());
                let y = out.data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..n {
                        let r = i * k..(i + 1) * k;
                        let dot: f64 = g[r.clone()]
                            .iter()
                            .zip(&y[r.clone()])
                            .map(|(g, y)| g * y)
                            .sum();
                        for j in r {
                            s[j] += y[j] * (g[j] - dot) / t;
                        }
                    }
                });
            }
            Op::LogSoftmax(a, t) => {
                let (n, k) = (out.rows(), out.cols());
                let y = out.data();
                self.accumulate(grads, *a, |s| {
                    for i in 0..n {
                        let r = i * k..(i + 1) * k;
                        let gsum: f64 = g[r.clone()].iter().sum();
                        for j in r {
                            s[j] += (g[j] - y[j].exp() * gsum) / t;
                        }
                    }
                });
            }
            Op::GradReverse(a, scale) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += -scale * g)
                });
            }
            Op::Corrupted(a) => {
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += 0.5 * g)
                });
            }
        }
    }
}
