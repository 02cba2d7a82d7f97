use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{add_into, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::params::{ParamId, ParamStore};
use super::{sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    AddConst(usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    MulConst(usize, Vec<f64>),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: usize,
        kernel: usize,
    },
    Relu(usize),
    Silu(usize),
    Sigmoid(usize),
    Glu(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        // (row, gradient of the row w.r.t. the logits, already divided by count)
        grads: Vec<(usize, Vec<f64>)>,
    },
}

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl std::ops::Deref for Value {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Dynamic tape. Every op evaluates eagerly and records what backward needs.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    param_leaves: Vec<(u64, usize, Var)>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_leaves: Vec::new(),
            rng: None,
        }
    }

    /// Training-mode graph with a seeded dropout generator.
    pub fn training(seed: u64) -> Self {
        let mut g = Graph::new();
        g.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Constant leaf that borrows shared storage instead of copying.
    pub fn shared_constant(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: Value::Shared(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf. Repeated requests for the same parameter share one node.
    /// Parameters of a frozen store are recorded as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Shared(store.shared_value(id)),
            op: Op::Leaf,
            requires_grad: !store.is_frozen(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        self.param_leaves.push((key.0, key.1, v));
        v
    }

    pub(crate) fn param_leaves(&self) -> &[(u64, usize, Var)] {
        &self.param_leaves
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a.0, b.0), rg))
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.cols() != tb.cols() {
            return Err(Error::dim("matmul_nt", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a.0), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::dim(op, self.val(a).shape(), self.val(b).shape()));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0)))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                add_into(row, tb.data());
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x.0, bias.0), rg))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor { shape, data }, Op::AddConst(x.0), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor { shape, data }, Op::Scale(x.0, c), rg)
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.val(s).numel() != 1 {
            return Err(Error::dim("scale_by", self.val(x).shape(), self.val(s).shape()));
        }
        let c = self.val(s).item();
        let t = self.val(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0) || self.rg(s.0);
        Ok(self.push(Tensor { shape, data }, Op::ScaleBy(x.0, s.0), rg))
    }

    /// Elementwise product with a constant of the same size (dropout and row masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.val(x);
        if c.len() != t.numel() {
            return Err(Error::dim("mul_const", t.shape(), &[c.len()]));
        }
        let data = t.data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(Tensor { shape, data }, Op::MulConst(x.0, c), rg))
    }

    /// Zeroes every row whose flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.val(x);
        if keep.len() != t.rows() {
            return Err(Error::dim("mask_rows", t.shape(), &[keep.len()]));
        }
        let c = t.cols();
        let mut m = Vec::with_capacity(t.numel());
        for &k in keep {
            m.extend(std::iter::repeat_n(if k { 1.0 } else { 0.0 }, c));
        }
        self.mul_const(x, m)
    }

    /// Inverted dropout; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let n = self.val(x).numel();
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.val(x).data().iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let n = t.numel().max(1) as f64;
        let s: f64 = t.data().iter().sum::<f64>() / n;
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over `axis` of a 2-D tensor (0 = down columns, 1 = along rows).
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax(x),
            0 => {
                let t = self.transpose(x)?;
                let s = self.softmax(t)?;
                self.transpose(s)
            }
            _ => Err(Error::Config(format!("softmax axis {axis} out of range"))),
        }
    }

    /// Softmax over the last axis where `allowed[i * cols + j] == false` entries
    /// receive exactly zero weight. A row with no allowed entry is all zeros.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.val(x).numel() {
            return Err(Error::dim("masked_softmax", self.val(x).shape(), &[allowed.len()]));
        }
        self.softmax_impl(x, Some(allowed))
    }

    fn softmax_impl(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        let mut out = vec![0.0; t.numel()];
        if c > 0 {
            for (r, (row, orow)) in t.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
                let ok = |j: usize| allowed.is_none_or(|a| a[r * c + j]);
                let mut m = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if ok(j) && v > m {
                        m = v;
                    }
                }
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let mut s = 0.0;
                for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                    if ok(j) {
                        *o = (v - m).exp();
                        s += *o;
                    }
                }
                for o in orow.iter_mut() {
                    *o /= s;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(x.0), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        let mut out = Vec::with_capacity(t.numel());
        if c > 0 {
            for row in t.data().chunks(c) {
                out.extend(super::log_softmax_slice(row));
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(Tensor { shape, data: out }, Op::LogSoftmax(x.0), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.val(x);
        let d = t.cols();
        if d < 2 {
            return Err(Error::Degenerate {
                op: "layer_norm",
                detail: format!("normalized dimension {d} < 2"),
            });
        }
        let (tg, tb) = (self.val(gamma), self.val(beta));
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::dim("layer_norm", t.shape(), tg.shape()));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-channel 1-D convolution of a T×d input with a k×d kernel, "same"
    /// zero padding.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.val(x), self.val(kernel));
        let k = tk.rows();
        if k % 2 == 0 {
            return Err(Error::KernelSize(k));
        }
        if tk.cols() != tx.cols() {
            return Err(Error::dim("depthwise_conv1d", tx.shape(), tk.shape()));
        }
        let (t_len, d) = (tx.rows(), tx.cols());
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xs = &tx.data()[src as usize * d..(src as usize + 1) * d];
                let ks = &tk.data()[j * d..(j + 1) * d];
                let o = &mut out[t * d..(t + 1) * d];
                for c in 0..d {
                    o[c] += ks[c] * xs[c];
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(kernel.0);
        Ok(self.push(
            Tensor::matrix(t_len, d, out)?,
            Op::Conv1d {
                x: x.0,
                kernel: kernel.0,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    /// Gated linear unit over columns: first half ⊙ σ(second half).
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        if !c.is_multiple_of(2) {
            return Err(Error::Degenerate {
                op: "glu",
                detail: format!("odd width {c}"),
            });
        }
        let h = c / 2;
        let rows = t.rows();
        let mut out = vec![0.0; rows * h];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            for j in 0..h {
                out[r * h + j] = row[j] * sigmoid(row[h + j]);
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::matrix(rows, h, out)?, Op::Glu(x.0), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.val(p)).collect();
        let t = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(t, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.val(p).rows());
        let mut cols = 0;
        for &p in parts {
            if self.val(p).rows() != rows {
                return Err(Error::dim("concat_cols", &[rows], self.val(p).shape()));
            }
            cols += self.val(p).cols();
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.val(p);
            let c = t.cols();
            for r in 0..rows {
                out[r * cols + off..r * cols + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x);
        if start + len > t.rows() {
            return Err(Error::dim("slice_rows", t.shape(), &[start, len]));
        }
        let out = t.slice_rows(start, len);
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::SliceRows { x: x.0, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        if start + len > c {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::matrix(rows, len, out)?, Op::SliceCols { x: x.0, start }, rg))
    }

    /// Row lookup into a V×d table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.val(table);
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table.0);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean label-smoothed negative log-likelihood over the rows whose target
    /// is not `ignore`. The target class gets weight `1 − ε`, every other class
    /// `ε / (V − 1)`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        ignore: Option<usize>,
    ) -> Result<Var> {
        let t = self.val(logits);
        let (rows, v) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0,1)")));
        }
        let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
        let on = 1.0 - smoothing;
        let count = targets.iter().filter(|&&y| Some(y) != ignore).count();
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(count);
        for (r, &y) in targets.iter().enumerate() {
            if Some(y) == ignore {
                continue;
            }
            if y >= v {
                return Err(Error::Vocabulary { id: y, size: v });
            }
            let lp = super::log_softmax_slice(t.row(r));
            let mut g = Vec::with_capacity(v);
            for (j, &l) in lp.iter().enumerate() {
                let q = if j == y { on } else { off };
                loss -= q * l;
                g.push((l.exp() - q) / count as f64);
            }
            grads.push((r, g));
        }
        if count > 0 {
            loss /= count as f64;
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                grads,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.val(loss);
        if lt.numel() != 1 {
            return Err(Error::Rank(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(gy);
                continue;
            }
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
            f(buf);
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |ga| matmul_nt_acc(gy, tb.data(), ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_acc(ta.data(), gy, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &mut |ga| matmul_acc(gy, tb.data(), ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_acc(gy, ta.data(), gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += gy[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gy));
                acc(*b, &mut |gb| add_into(gb, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gy));
                acc(*b, &mut |gb| {
                    for (g, d) in gb.iter_mut().zip(gy) {
                        *g -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |ga| {
                    for ((g, d), v) in ga.iter_mut().zip(gy).zip(tb.data()) {
                        *g += d * v;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((g, d), v) in gb.iter_mut().zip(gy).zip(ta.data()) {
                        *g += d * v;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, gy));
                let c = y.cols();
                acc(*b, &mut |gb| {
                    if c > 0 {
                        for row in gy.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                });
            }
            Op::AddConst(x) => acc(*x, &mut |gx| add_into(gx, gy)),
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (g, d) in gx.iter_mut().zip(gy) {
                    *g += c * d;
                }
            }),
            Op::ScaleBy(x, s) => {
                let c = nodes[*s].value.item();
                let tx = &nodes[*x].value;
                acc(*x, &mut |gx| {
                    for (g, d) in gx.iter_mut().zip(gy) {
                        *g += c * d;
                    }
                });
                acc(*s, &mut |gs| {
                    gs[0] += gy.iter().zip(tx.data()).map(|(d, v)| d * v).sum::<f64>();
                });
            }
            Op::MulConst(x, m) => acc(*x, &mut |gx| {
                for ((g, d), v) in gx.iter_mut().zip(gy).zip(m) {
                    *g += d * v;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| {
                for g in gx.iter_mut() {
                    *g += gy[0];
                }
            }),
            Op::Mean(x) => {
                let n = nodes[*x].value.numel().max(1) as f64;
                acc(*x, &mut |gx| {
                    for g in gx.iter_mut() {
                        *g += gy[0] / n;
                    }
                })
            }
            Op::Softmax(x) => {
                let c = y.cols();
                acc(*x, &mut |gx| {
                    if c == 0 {
                        return;
                    }
                    for ((yr, gr), dr) in y.data().chunks(c).zip(gx.chunks_mut(c)).zip(gy.chunks(c)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ((g, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                acc(*x, &mut |gx| {
                    if c == 0 {
                        return;
                    }
                    for ((yr, gr), dr) in y.data().chunks(c).zip(gx.chunks_mut(c)).zip(gy.chunks(c)) {
                        let s: f64 = dr.iter().sum();
                        for ((g, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += dv - yv.exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = y.cols();
                let rows = y.rows();
                let tg = &nodes[*gamma].value;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let dr = &gy[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = dr[j] * tg.data()[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let k = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dh = dr[j] * tg.data()[j];
                            gx[r * d + j] += k * (d as f64 * dh - s1 - hr[j] * s2);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        add_into(gb, &gy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Conv1d { x, kernel } => {
                let (tx, tk) = (&nodes[*x].value, &nodes[*kernel].value);
                let (t_len, d, k) = (tx.rows(), tx.cols(), tk.rows());
                let pad = (k - 1) / 2;
                let each = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for t in 0..t_len {
                        for j in 0..k {
                            let src = t as isize + j as isize - pad as isize;
                            if src >= 0 && src < t_len as isize {
                                f(t, j, src as usize);
                            }
                        }
                    }
                };
                acc(*x, &mut |gx| {
                    each(&mut |t, j, src| {
                        for c in 0..d {
                            gx[src * d + c] += tk.data()[j * d + c] * gy[t * d + c];
                        }
                    })
                });
                acc(*kernel, &mut |gk| {
                    each(&mut |t, j, src| {
                        for c in 0..d {
                            gk[j * d + c] += tx.data()[src * d + c] * gy[t * d + c];
                        }
                    })
                });
            }
            Op::Relu(x) => {
                let tx = &nodes[*x].value;
                acc(*x, &mut |gx| {
                    for ((g, d), v) in gx.iter_mut().zip(gy).zip(tx.data()) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let tx = &nodes[*x].value;
                acc(*x, &mut |gx| {
                    for ((g, d), &v) in gx.iter_mut().zip(gy).zip(tx.data()) {
                        let s = sigmoid(v);
                        *g += d * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((g, d), &s) in gx.iter_mut().zip(gy).zip(y.data()) {
                    *g += d * s * (1.0 - s);
                }
            }),
            Op::Glu(x) => {
                let tx = &nodes[*x].value;
                let c = tx.cols();
                let h = c / 2;
                acc(*x, &mut |gx| {
                    for r in 0..tx.rows() {
                        let row = &tx.data()[r * c..(r + 1) * c];
                        for j in 0..h {
                            let s = sigmoid(row[h + j]);
                            let d = gy[r * h + j];
                            gx[r * c + j] += d * s;
                            gx[r * c + h + j] += d * row[j] * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    let slice = &gy[off..off + n];
                    acc(p, &mut |gp| add_into(gp, slice));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let cols = y.cols();
                let rows = y.rows();
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &gy[r * cols + off..r * cols + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                let s = *start * c;
                acc(*x, &mut |gx| add_into(&mut gx[s..s + gy.len()], gy));
            }
            Op::SliceCols { x, start } => {
                let c = nodes[*x].value.cols();
                let len = y.cols();
                let rows = y.rows();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * c + start..r * c + start + len],
                            &gy[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = y.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy { logits, grads: rowg } => {
                let v = nodes[*logits].value.cols();
                acc(*logits, &mut |gl| {
                    for (r, g) in rowg {
                        for (dst, src) in gl[r * v..(r + 1) * v].iter_mut().zip(g) {
                            *dst += gy[0] * src;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_swap() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(m(2, 2, &[1., 2., 3., 4.]));
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let s = g.constant(m(2, 2, &[0., 1., 1., 0.]));
        let q = g.matmul(a, s).unwrap();
        assert_eq!(g.value(q).data(), &[2., 1., 4., 3.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let s = g.softmax(x).unwrap();
        assert!((g.value(s).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_handles_huge_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e300, -1e300, 0.0]));
        let s = g.softmax(x).unwrap();
        assert!(g.value(s).is_finite());
        assert_eq!(g.value(s).data()[0], 1.0);
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut g = Graph::new();
        let x = g.constant(m(2, 2, &[0., 1., 0., 3.]));
        let s = g.softmax_axis(x, 0).unwrap();
        let v = g.value(s);
        assert!((v.get(0, 0) + v.get(1, 0) - 1.0).abs() < 1e-12);
        assert_eq!(v.get(0, 0), 0.5);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let one = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let zero = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-9);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-9);

        let c = g.constant(Tensor::vector(vec![3.0, 3.0, 3.0]));
        let gm = g.constant(Tensor::vector(vec![2.0, 2.0, 2.0]));
        let bt = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let y = g.layer_norm(c, gm, bt, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3]);

        let r = g.constant(Tensor::vector(vec![1.0, 5.0, -2.0]));
        let gz = g.constant(Tensor::vector(vec![0.0; 3]));
        let y = g.layer_norm(r, gz, bt, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0]));
        let one = g.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(
            g.layer_norm(x, one, one, 1e-5),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(3, 1, &[1., 2., 3.]));
        let k = g.constant(m(3, 1, &[1., 1., 1.]));
        let y = g.depthwise_conv1d(x, k).unwrap();
        assert_eq!(g.value(y).data(), &[3., 6., 5.]);

        let x2 = g.constant(m(3, 2, &[1., -1., 2., -2., 3., -3.]));
        let ident = g.constant(m(3, 2, &[0., 0., 1., 1., 0., 0.]));
        let y = g.depthwise_conv1d(x2, ident).unwrap();
        assert_eq!(g.value(y).data(), g.value(x2).data());

        let even = g.constant(m(2, 1, &[1., 1.]));
        assert!(matches!(g.depthwise_conv1d(x, even), Err(Error::KernelSize(2))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(u, &[2], 0.0, None).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let p = g.constant(m(1, 3, &[1000., 0., 0.]));
        let l = g.cross_entropy(p, &[0], 0.0, None).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let b = g.constant(Tensor::zeros(&[1, 2]));
        let l = g.cross_entropy(b, &[0], 0.2, None).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        assert!(matches!(
            g.cross_entropy(b, &[5], 0.0, None),
            Err(Error::Vocabulary { id: 5, size: 2 })
        ));
    }

    #[test]
    fn cross_entropy_skips_ignored_rows() {
        let mut g = Graph::new();
        let x = g.constant(m(2, 2, &[0., 0., 5., -5.]));
        let l = g.cross_entropy(x, &[0, 9], 0.0, Some(9)).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.variable(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let s = g.sum(x);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Rank(_))));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let build = |g: &mut Graph| {
            let x = g.variable(m(2, 2, &[0.3, -0.2, 0.5, 1.5]));
            let s = g.softmax(x).unwrap();
            let l1 = g.sum(s);
            let t = g.silu(x);
            let l2 = g.mean(t);
            (x, l1, l2)
        };
        let mut g = Graph::new();
        let (x, l1, l2) = build(&mut g);
        let tot = g.add(l1, l2).unwrap();
        let joint = g.backward(tot).unwrap().get(x).unwrap().to_vec();
        let a = g.backward(l1).unwrap().get(x).unwrap().to_vec();
        let b = g.backward(l2).unwrap().get(x).unwrap().to_vec();
        for i in 0..4 {
            assert!((joint[i] - a[i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn masked_softmax_gives_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(m(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let y = g.masked_softmax(x, &[true, false, false, true, true, false]).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.get(1, 2), 0.0);
        assert!((v.get(1, 0) + v.get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_only_in_training() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 4], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(y, x);
        let mut g = Graph::training(3);
        let x = g.constant(Tensor::full(&[8, 8], 1.0));
        let y = g.dropout(x, 0.5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
