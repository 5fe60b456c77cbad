//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context for its backward rule. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and `backward` is a single
//! reverse sweep.

use std::fmt;

use super::{Precision, Tensor};
use crate::error::{MspError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// User-supplied operation with an explicit backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    NeighborScores { q: Var, k: Var, heads: usize, kk: usize },
    NeighborMix { w: Var, v: Var, heads: usize, kk: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    CosineLoss { pred: Var, targets: Vec<f64>, valid: Vec<bool> },
    Chamfer { pred: Var, targets: Vec<Vec<[f64; 3]>> },
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Transpose(_) => "transpose",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::NeighborScores { .. } => "neighbor_scores",
            Op::NeighborMix { .. } => "neighbor_mix",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::CosineLoss { .. } => "cosine_loss",
            Op::Chamfer { .. } => "chamfer",
            Op::Custom(op, _) => op.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(MspError::shape(op, s, &[])),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape { precision, ..Tape::default() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.precision.round(value.data_mut());
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> String {
        format!("{:?}", self.nodes[v.0].op)
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(MspError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if tb.numel() == ta.cols() && (tb.shape().len() == 1 || (tb.shape().len() == 2 && tb.shape()[0] == 1)) {
            Ok(Bcast::Row)
        } else {
            Err(MspError::shape(op, ta.shape(), tb.shape()))
        }
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let bc = self.bcast(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (ad, bd) = (ta.data(), tb.data());
        let data = match bc {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Row => {
                let c = ta.cols().max(1);
                ad.chunks(c).flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect()
            }
        };
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, bc), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, bc), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if c == 0 {
            return Err(MspError::shape("softmax_lastdim", ta.shape(), &[]));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if c == 0 {
            return Err(MspError::shape("log_softmax_lastdim", ta.shape(), &[]));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    /// Normalize each row over the last dimension (biased variance), then
    /// apply `gain` and `bias` (each of last-dimension length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if c == 0 {
            return Err(MspError::shape("layer_norm", tx.shape(), &[]));
        }
        for p in [gain, bias] {
            if self.value(p).numel() != c {
                return Err(MspError::shape("layer_norm", tx.shape(), self.shape(p)));
            }
        }
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * is;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat.iter().enumerate().map(|(i, &h)| h * g[i % c] + b[i % c]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "transpose")?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, _) = dims2(self.value(a), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(MspError::Contract(format!("gather_rows index {bad} out of {m} rows")));
        }
        let t = self.value(a).gather_rows(idx);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| MspError::Contract("concat_rows of nothing".into()))?;
        let (_, c) = dims2(self.value(first), "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = dims2(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(MspError::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| MspError::Contract("concat_cols of nothing".into()))?;
        let (m, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != m {
                return Err(MspError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, c) = dims2(self.value(a), "slice_cols")?;
        if start + len > c {
            return Err(MspError::shape("slice_cols", self.shape(a), &[start, len]));
        }
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols(a, start), rg))
    }

    /// Per-head dot products between each query and its `kk` gathered keys.
    ///
    /// `q`: `[n, C]`; `k`: `[n * kk, C]` where rows `i*kk..(i+1)*kk` are the
    /// keys of query `i`. Output `[n * heads, kk]`, row `i*heads + h`.
    pub fn neighbor_scores(&mut self, q: Var, k: Var, heads: usize, kk: usize) -> Result<Var> {
        let (n, c) = dims2(self.value(q), "neighbor_scores")?;
        let (nk, ck) = dims2(self.value(k), "neighbor_scores")?;
        if heads == 0 || c % heads != 0 || ck != c || nk != n * kk {
            return Err(MspError::shape("neighbor_scores", self.shape(q), self.shape(k)));
        }
        let dh = c / heads;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; n * heads * kk];
        for i in 0..n {
            for h in 0..heads {
                let qrow = &qd[i * c + h * dh..i * c + (h + 1) * dh];
                for j in 0..kk {
                    let krow = &kd[(i * kk + j) * c + h * dh..(i * kk + j) * c + (h + 1) * dh];
                    out[(i * heads + h) * kk + j] = dot(qrow, krow);
                }
            }
        }
        let rg = self.rg(&[q, k]);
        Ok(self.push(Tensor::matrix(n * heads, kk, out)?, Op::NeighborScores { q, k, heads, kk }, rg))
    }

    /// Per-head weighted sums of gathered values.
    ///
    /// `w`: `[n * heads, kk]`; `v`: `[n * kk, C]`. Output `[n, C]`.
    pub fn neighbor_mix(&mut self, w: Var, v: Var, heads: usize, kk: usize) -> Result<Var> {
        let (nw, kw) = dims2(self.value(w), "neighbor_mix")?;
        let (nv, c) = dims2(self.value(v), "neighbor_mix")?;
        if heads == 0 || kw != kk || nw % heads != 0 || c % heads != 0 || nv != (nw / heads) * kk {
            return Err(MspError::shape("neighbor_mix", self.shape(w), self.shape(v)));
        }
        let n = nw / heads;
        let dh = c / heads;
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for h in 0..heads {
                let orow = &mut out[i * c + h * dh..i * c + (h + 1) * dh];
                for j in 0..kk {
                    let a = wd[(i * heads + h) * kk + j];
                    let vrow = &vd[(i * kk + j) * c + h * dh..(i * kk + j) * c + (h + 1) * dh];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += a * x;
                    }
                }
            }
        }
        let rg = self.rg(&[w, v]);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::NeighborMix { w, v, heads, kk }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != targets.shape() {
            return Err(MspError::shape("bce_with_logits", tl.shape(), targets.shape()));
        }
        let n = tl.numel();
        if n == 0 {
            return Err(MspError::DegenerateTarget("empty BCE batch".into()));
        }
        let total: f64 =
            tl.data().iter().zip(targets.data()).map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()).sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::BceWithLogits { logits, targets: targets.data().to_vec() },
            rg,
        ))
    }

    /// Mean over rows of `1 - cos(pred_i, target_i)`. Rows where either side
    /// has zero norm are excluded; the count of excluded rows is returned.
    /// Targets are constants.
    pub fn cosine_loss(&mut self, pred: Var, targets: &Tensor) -> Result<(Var, usize)> {
        let tp = self.value(pred);
        if tp.shape() != targets.shape() {
            return Err(MspError::shape("cosine_loss", tp.shape(), targets.shape()));
        }
        let c = tp.cols();
        let rows = tp.numel().checked_div(c).unwrap_or(0);
        let mut valid = vec![false; rows];
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..rows {
            let p = &tp.data()[i * c..(i + 1) * c];
            let t = &targets.data()[i * c..(i + 1) * c];
            let (np, nt) = (norm(p), norm(t));
            if np > 0.0 && nt > 0.0 {
                valid[i] = true;
                total += 1.0 - dot(p, t) / (np * nt);
                count += 1;
            }
        }
        if count == 0 {
            return Err(MspError::DegenerateTarget("all cosine rows have zero norm".into()));
        }
        let rg = self.rg(&[pred]);
        let v = self.push(
            Tensor::scalar(total / count as f64),
            Op::CosineLoss { pred, targets: targets.data().to_vec(), valid },
            rg,
        );
        Ok((v, rows - count))
    }

    /// Symmetric Chamfer loss between predicted point sets (`[n, 3K]`, K
    /// points per row) and per-row target sets. Rows with an empty target
    /// set are skipped; the count of skipped rows is returned.
    pub fn chamfer(&mut self, pred: Var, targets: &[Vec<[f64; 3]>]) -> Result<(Var, usize)> {
        let (n, c) = dims2(self.value(pred), "chamfer")?;
        if n != targets.len() || c % 3 != 0 || c == 0 {
            return Err(MspError::shape("chamfer", self.shape(pred), &[targets.len()]));
        }
        let kp = c / 3;
        let pd = self.value(pred).data();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, tset) in targets.iter().enumerate() {
            if tset.is_empty() {
                continue;
            }
            let row = &pd[i * c..(i + 1) * c];
            let (fwd, bwd) = chamfer_terms(row, kp, tset);
            total += fwd + bwd;
            count += 1;
        }
        if count == 0 {
            return Err(MspError::DegenerateTarget("every point-set target is empty".into()));
        }
        let rg = self.rg(&[pred]);
        let v = self.push(Tensor::scalar(total / count as f64), Op::Chamfer { pred, targets: targets.to_vec() }, rg);
        Ok((v, n - count))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&vals)?;
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Custom(op, inputs.to_vec()), rg))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`. Afterwards [`Tape::grad`] returns
    /// the gradient of every differentiable node (zeros if unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(MspError::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter_mut().flatten() {
            self.precision.round(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).unwrap(),
            None => Tensor::zeros(&shape),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }

    /// Accumulate `g` (shaped like the broadcast output) into operand `b`.
    fn acc_bcast(&self, grads: &mut [Option<Vec<f64>>], b: Var, bc: Bcast, cols: usize, g: &[f64]) {
        self.acc(grads, b, |buf| match bc {
            Bcast::Same => axpy(1.0, g, buf),
            Bcast::Scalar => buf[0] += g.iter().sum::<f64>(),
            Bcast::Row => {
                for row in g.chunks(cols.max(1)) {
                    axpy(1.0, row, buf);
                }
            }
        });
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                self.acc(grads, *a, |buf| {
                    // dA = G * B^T, as row axpys over a transposed copy of B
                    let mut bt = vec![0.0; k * n];
                    for kk in 0..k {
                        for j in 0..n {
                            bt[j * k + kk] = bd[kk * n + j];
                        }
                    }
                    for r in 0..m {
                        let orow = &mut buf[r * k..(r + 1) * k];
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv != 0.0 {
                                axpy(gv, &bt[j * k..(j + 1) * k], orow);
                            }
                        }
                    }
                });
                self.acc(grads, *b, |buf| {
                    // dB = A^T * G
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let a = ad[r * k + kk];
                            if a != 0.0 {
                                axpy(a, grow, &mut buf[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b, bc) => {
                self.acc(grads, *a, |buf| axpy(1.0, g, buf));
                self.acc_bcast(grads, *b, *bc, out.cols(), g);
            }
            Op::Sub(a, b, bc) => {
                self.acc(grads, *a, |buf| axpy(1.0, g, buf));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc_bcast(grads, *b, *bc, out.cols(), &neg);
            }
            Op::Mul(a, b, bc) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let c = out.cols();
                self.acc(grads, *a, |buf| match bc {
                    Bcast::Same => buf.iter_mut().zip(g.iter().zip(bd)).for_each(|(o, (gv, bv))| *o += gv * bv),
                    Bcast::Scalar => axpy(bd[0], g, buf),
                    Bcast::Row => {
                        for (orow, grow) in buf.chunks_mut(c.max(1)).zip(g.chunks(c.max(1))) {
                            orow.iter_mut().zip(grow.iter().zip(bd)).for_each(|(o, (gv, bv))| *o += gv * bv);
                        }
                    }
                });
                let ga: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                self.acc_bcast(grads, *b, *bc, c, &ga);
            }
            Op::Scale(a, c) => self.acc(grads, *a, |buf| axpy(*c, g, buf)),
            Op::Sigmoid(a) => self.acc(grads, *a, |buf| {
                for ((b, gv), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *b += gv * y * (1.0 - y);
                }
            }),
            Op::Log(a) => self.acc(grads, *a, |buf| {
                for ((b, gv), x) in buf.iter_mut().zip(g).zip(val(*a).data()) {
                    *b += gv / x;
                }
            }),
            Op::Relu(a) => self.acc(grads, *a, |buf| {
                for ((b, gv), x) in buf.iter_mut().zip(g).zip(val(*a).data()) {
                    if *x > 0.0 {
                        *b += gv;
                    }
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |buf| {
                for ((b, gv), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *b += gv * (1.0 - y * y);
                }
            }),
            Op::Softmax(a) => {
                let c = out.cols();
                self.acc(grads, *a, |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            brow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                self.acc(grads, *a, |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for j in 0..c {
                            brow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = out.cols();
                let gd = val(*gain).data();
                self.acc(grads, *x, |buf| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = grow[j] * gd[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = grow[j] * gd[j];
                            buf[r * c + j] += is * (dh - m1 - hrow[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gain, |buf| {
                    for (idx, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        buf[idx % c] += gv * h;
                    }
                });
                self.acc(grads, *bias, |buf| {
                    for (idx, gv) in g.iter().enumerate() {
                        buf[idx % c] += gv;
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                self.acc(grads, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0] / n));
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                self.acc(grads, *a, |buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = out.cols();
                self.acc(grads, *a, |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(1.0, &g[r * c..(r + 1) * c], &mut buf[src * c..(src + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).numel();
                    self.acc(grads, *p, |buf| axpy(1.0, &g[offset..offset + n], buf));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut start = 0;
                for p in parts {
                    let w = val(*p).cols();
                    self.acc(grads, *p, |buf| {
                        for r in 0..out.rows() {
                            axpy(1.0, &g[r * total + start..r * total + start + w], &mut buf[r * w..(r + 1) * w]);
                        }
                    });
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let c = val(*a).cols();
                let w = out.cols();
                self.acc(grads, *a, |buf| {
                    for r in 0..out.rows() {
                        axpy(1.0, &g[r * w..(r + 1) * w], &mut buf[r * c + start..r * c + start + w]);
                    }
                });
            }
            Op::NeighborScores { q, k, heads, kk } => {
                let (qd, kd) = (val(*q).data(), val(*k).data());
                let c = val(*q).cols();
                let n = val(*q).rows();
                let dh = c / heads;
                self.acc(grads, *q, |buf| {
                    for i in 0..n {
                        for h in 0..*heads {
                            for j in 0..*kk {
                                let gv = g[(i * heads + h) * kk + j];
                                let ko = (i * kk + j) * c + h * dh;
                                axpy(gv, &kd[ko..ko + dh], &mut buf[i * c + h * dh..i * c + (h + 1) * dh]);
                            }
                        }
                    }
                });
                self.acc(grads, *k, |buf| {
                    for i in 0..n {
                        for h in 0..*heads {
                            let qrow = &qd[i * c + h * dh..i * c + (h + 1) * dh];
                            for j in 0..*kk {
                                let gv = g[(i * heads + h) * kk + j];
                                let ko = (i * kk + j) * c + h * dh;
                                axpy(gv, qrow, &mut buf[ko..ko + dh]);
                            }
                        }
                    }
                });
            }
            Op::NeighborMix { w, v, heads, kk } => {
                let (wd, vd) = (val(*w).data(), val(*v).data());
                let c = out.cols();
                let n = out.rows();
                let dh = c / heads;
                self.acc(grads, *w, |buf| {
                    for i in 0..n {
                        for h in 0..*heads {
                            let grow = &g[i * c + h * dh..i * c + (h + 1) * dh];
                            for j in 0..*kk {
                                let vo = (i * kk + j) * c + h * dh;
                                buf[(i * heads + h) * kk + j] += dot(grow, &vd[vo..vo + dh]);
                            }
                        }
                    }
                });
                self.acc(grads, *v, |buf| {
                    for i in 0..n {
                        for h in 0..*heads {
                            let grow = &g[i * c + h * dh..i * c + (h + 1) * dh];
                            for j in 0..*kk {
                                let a = wd[(i * heads + h) * kk + j];
                                let vo = (i * kk + j) * c + h * dh;
                                axpy(a, grow, &mut buf[vo..vo + dh]);
                            }
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len() as f64;
                self.acc(grads, *logits, |buf| {
                    for ((b, x), t) in buf.iter_mut().zip(val(*logits).data()).zip(targets) {
                        *b += g[0] * (sigmoid(*x) - t) / n;
                    }
                });
            }
            Op::CosineLoss { pred, targets, valid } => {
                let pd = val(*pred).data();
                let c = val(*pred).cols();
                let count = valid.iter().filter(|v| **v).count() as f64;
                self.acc(grads, *pred, |buf| {
                    for (r, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
                        let p = &pd[r * c..(r + 1) * c];
                        let t = &targets[r * c..(r + 1) * c];
                        let (np, nt) = (norm(p), norm(t));
                        let cos = dot(p, t) / (np * nt);
                        for j in 0..c {
                            let d = -(t[j] / (nt * np) - cos * p[j] / (np * np));
                            buf[r * c + j] += g[0] * d / count;
                        }
                    }
                });
            }
            Op::Chamfer { pred, targets } => {
                let pd = val(*pred).data();
                let c = val(*pred).cols();
                let kp = c / 3;
                let count = targets.iter().filter(|t| !t.is_empty()).count() as f64;
                self.acc(grads, *pred, |buf| {
                    for (r, tset) in targets.iter().enumerate() {
                        if tset.is_empty() {
                            continue;
                        }
                        let row = &pd[r * c..(r + 1) * c];
                        let brow = &mut buf[r * c..(r + 1) * c];
                        let scale = g[0] / count;
                        for k in 0..kp {
                            let p = [row[3 * k], row[3 * k + 1], row[3 * k + 2]];
                            let t = tset[nearest(&p, tset.iter().copied())];
                            for a in 0..3 {
                                brow[3 * k + a] += scale * 2.0 * (p[a] - t[a]) / kp as f64;
                            }
                        }
                        let pts = (0..kp).map(|k| [row[3 * k], row[3 * k + 1], row[3 * k + 2]]);
                        for t in tset {
                            let k = nearest(t, pts.clone());
                            for a in 0..3 {
                                brow[3 * k + a] += scale * 2.0 * (row[3 * k + a] - t[a]) / tset.len() as f64;
                            }
                        }
                    }
                });
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&vals, out, g);
                for (v, gv) in inputs.iter().zip(gs) {
                    self.acc(grads, *v, |buf| axpy(1.0, &gv, buf));
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                axpy(av, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    }
    out
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Index of the first point in `set` closest to `p`.
fn nearest(p: &[f64; 3], set: impl Iterator<Item = [f64; 3]>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, q) in set.enumerate() {
        let d = sq_dist(p, &q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// (mean over predictions of min sq. distance to targets,
///  mean over targets of min sq. distance to predictions)
fn chamfer_terms(row: &[f64], kp: usize, tset: &[[f64; 3]]) -> (f64, f64) {
    let pts: Vec<[f64; 3]> = (0..kp).map(|k| [row[3 * k], row[3 * k + 1], row[3 * k + 2]]).collect();
    let fwd =
        pts.iter().map(|p| tset.iter().map(|t| sq_dist(p, t)).fold(f64::INFINITY, f64::min)).sum::<f64>() / kp as f64;
    let bwd = tset.iter().map(|t| pts.iter().map(|p| sq_dist(p, t)).fold(f64::INFINITY, f64::min)).sum::<f64>()
        / tset.len() as f64;
    (fwd, bwd)
}
