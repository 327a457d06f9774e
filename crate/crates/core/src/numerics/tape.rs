//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes once in reverse order, accumulating (`+=`) gradients into inputs, so
//! a value consumed by several ops (e.g. prompt embeddings repeated across
//! parts) receives the sum of its contributions.

use std::collections::HashMap;

use super::graph::{self, GroupedEdge};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, gemm_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// GELU tanh-approximation cubic coefficient.
pub const GELU_COEFF: f64 = 0.044715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Unary(Var, Activation),
    SoftmaxRows(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Tensor),
    Smape(Var, Tensor, f64),
    CrossEntropy(Var, usize),
    EdgeWeights {
        nodes: Var,
        edges: Vec<GroupedEdge>,
        group_cosine: Vec<bool>,
    },
    SymNormalize(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recorded forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Result of [`Tape::backward`]: gradients of the loss w.r.t. every leaf that
/// requires a gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in tape registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(pid, idx)| self.grads[idx].as_ref().map(|g| (pid, g)))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", a.shape())));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_COEFF * x * x)
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter. Repeated calls with the same id return
    /// the same node; frozen parameters never require a gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable)?;
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_matrix("matmul", av)?;
        check_matrix("matmul", bv)?;
        let (p, q, r) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != q {
            return Err(Error::dim(
                "matmul",
                format!("{:?} · {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = Tensor::new(vec![p, r], gemm(av.data(), bv.data(), p, q, r))?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        check_matrix("transpose", self.value(a))?;
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a[p×q] + bias[q]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let q = av.cols();
        if bv.numel() != q {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + bias {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(q) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push("add_bias", out, Op::AddBias(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    pub fn unary_map(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let av = self.value(a);
        let data = match kind {
            Activation::Relu => av.data().iter().map(|&x| x.max(0.0)).collect(),
            Activation::Gelu => av.data().iter().map(|&x| gelu(x)).collect(),
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        self.push("unary_map", out, Op::Unary(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary_map(a, Activation::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary_map(a, Activation::Gelu)
    }

    /// Row-wise softmax, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let q = av.cols();
        let mut out = Tensor::zeros(av.shape());
        for (src, dst) in av.data().chunks(q).zip(out.data_mut().chunks_mut(q)) {
            softmax_row(src, dst);
        }
        let rg = self.rg(&[a]);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), rg)
    }

    /// Row `i` is a softmax over columns `0..=i`; later columns are zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_matrix("causal_softmax", av)?;
        let q = av.cols();
        let mut out = Tensor::zeros(av.shape());
        for (i, (src, dst)) in av.data().chunks(q).zip(out.data_mut().chunks_mut(q)).enumerate() {
            let k = (i + 1).min(q);
            softmax_row(&src[..k], &mut dst[..k]);
        }
        let rg = self.rg(&[a]);
        self.push("causal_softmax", out, Op::CausalSoftmax(a), rg)
    }

    /// Per-row standardization (population variance) followed by
    /// `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let m = xv.cols();
        if gv.numel() != m || bv.numel() != m {
            return Err(Error::dim("layer_norm", format!("width {m} vs gain {:?}", gv.shape())));
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for (r, row) in xv.data().chunks(m).enumerate() {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for k in 0..m {
                let h = (row[k] - mean) * rs;
                xhat[r * m + k] = h;
                out.data_mut()[r * m + k] = h * gv.data()[k] + bv.data()[k];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        check_matrix("gather_rows", tv)?;
        if indices.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {}", tv.rows())));
        }
        let data = indices.iter().flat_map(|&i| tv.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![indices.len(), tv.cols()], data)?;
        let rg = self.rg(&[table]);
        self.push("gather_rows", out, Op::GatherRows(table, indices.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            check_matrix("concat_rows", pv)?;
            if pv.cols() != cols {
                return Err(Error::dim("concat_rows", format!("cols {} vs {cols}", pv.cols())));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            check_matrix("concat_cols", pv)?;
            if pv.rows() != rows {
                return Err(Error::dim("concat_cols", format!("rows {} vs {rows}", pv.rows())));
            }
            let c = pv.cols();
            for i in 0..rows {
                out.data_mut()[i * total + off..i * total + off + c].copy_from_slice(pv.row(i));
            }
            off += c;
        }
        let rg = self.rg(parts);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        check_matrix("slice_rows", av)?;
        if len == 0 || start + len > av.rows() {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {}", av.rows())));
        }
        let c = av.cols();
        let out = Tensor::new(vec![len, c], av.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[a]);
        self.push("slice_rows", out, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        check_matrix("slice_cols", av)?;
        if len == 0 || start + len > av.cols() {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {}", av.cols())));
        }
        let data = (0..av.rows())
            .flat_map(|i| av.row(i)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![av.rows(), len], data)?;
        let rg = self.rg(&[a]);
        self.push("slice_cols", out, Op::SliceCols(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push("reshape", out, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push("sum", out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / av.numel() as f64);
        let rg = self.rg(&[a]);
        self.push("mean", out, Op::Mean(a), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() {
            return Err(Error::dim("mse", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        let n = pv.numel() as f64;
        let v = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        self.push("mse", Tensor::scalar(v), Op::Mse(pred, target.clone()), rg)
    }

    /// `(200/H) Σ |y − ŷ| / max(|y| + |ŷ|, floor)` against a constant target.
    pub fn smape(&mut self, pred: Var, target: &Tensor, floor: f64) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() {
            return Err(Error::dim("smape", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        let h = pv.numel() as f64;
        let v = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, y)| (y - p).abs() / (y.abs() + p.abs()).max(floor))
            .sum::<f64>()
            * 200.0
            / h;
        let rg = self.rg(&[pred]);
        self.push("smape", Tensor::scalar(v), Op::Smape(pred, target.clone(), floor), rg)
    }

    /// Negative log softmax probability of `class` for a single logit row.
    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 || class >= lv.cols() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?}, class {class}", lv.shape()),
            ));
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let out = Tensor::scalar(lse - lv.data()[class]);
        let rg = self.rg(&[logits]);
        self.push("cross_entropy", out, Op::CrossEntropy(logits, class), rg)
    }

    /// Dense group-normalized cosine adjacency `A[target][source]` computed
    /// from the rows of `nodes`; differentiable in `nodes`.
    pub fn edge_weights(&mut self, nodes: Var, edges: &[GroupedEdge], group_cosine: &[bool]) -> Result<Var> {
        let nv = self.value(nodes);
        check_matrix("edge_weights", nv)?;
        let l = nv.rows();
        if edges.iter().any(|e| e.source >= l || e.target >= l || e.group >= group_cosine.len()) {
            return Err(Error::dim("edge_weights", "edge endpoint or group out of range"));
        }
        let w = graph::group_weights(nv, edges, group_cosine);
        let out = graph::dense_adjacency(l, edges, &w);
        let rg = self.rg(&[nodes]);
        self.push(
            "edge_weights",
            out,
            Op::EdgeWeights {
                nodes,
                edges: edges.to_vec(),
                group_cosine: group_cosine.to_vec(),
            },
            rg,
        )
    }

    /// `D^{-1/2}(A + I)D^{-1/2}`; differentiable in `A`.
    pub fn sym_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        check_matrix("sym_normalize", av)?;
        if av.rows() != av.cols() {
            return Err(Error::dim("sym_normalize", format!("non-square {:?}", av.shape())));
        }
        let (out, degree) = graph::sym_normalize(av);
        let rg = self.rg(&[a]);
        self.push("sym_normalize", out, Op::SymNormalize(a, degree), rg)
    }

    /// Reverse pass from a scalar `loss`. A tape can be consumed only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same tape; re-run the forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut params: Vec<(ParamId, usize)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, r) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; p * q];
                    gemm_acc(g.data(), false, bv.data(), true, &mut da, p, r, q);
                    acc(*a, Tensor::new(vec![p, q], da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; q * r];
                    gemm_acc(av.data(), true, g.data(), false, &mut db, q, p, r);
                    acc(*b, Tensor::new(vec![q, r], db).expect("shape"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let neg = g.data().iter().map(|v| -v).collect();
                acc(*b, Tensor::new(g.shape().to_vec(), neg).expect("shape"));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), da).expect("shape"));
                acc(*b, Tensor::new(g.shape().to_vec(), db).expect("shape"));
            }
            Op::AddBias(a, bias) => {
                acc(*a, g.clone());
                let bshape = self.value(*bias).shape().to_vec();
                let q = g.cols();
                let mut db = vec![0.0; q];
                for row in g.data().chunks(q) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*bias, Tensor::new(bshape, db).expect("shape"));
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|v| v * c).collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::Unary(a, kind) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, &x)| match kind {
                        Activation::Relu => {
                            if x > 0.0 {
                                *gv
                            } else {
                                0.0
                            }
                        }
                        Activation::Gelu => gv * gelu_grad(x),
                    })
                    .collect();
                acc(*a, Tensor::new(g.shape().to_vec(), d).expect("shape"));
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                let q = out.cols();
                let mut d = vec![0.0; out.numel()];
                for ((y, gr), dr) in out.data().chunks(q).zip(g.data().chunks(q)).zip(d.chunks_mut(q)) {
                    let s: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..q {
                        dr[k] = y[k] * (gr[k] - s);
                    }
                }
                acc(*a, Tensor::new(out.shape().to_vec(), d).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let m = out.cols();
                let mut dgain = vec![0.0; m];
                let mut dbias = vec![0.0; m];
                let mut dx = vec![0.0; out.numel()];
                for (r, grow) in g.data().chunks(m).enumerate() {
                    let xh = &xhat[r * m..(r + 1) * m];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for k in 0..m {
                        dgain[k] += grow[k] * xh[k];
                        dbias[k] += grow[k];
                        let dh = grow[k] * gv.data()[k];
                        mean_d += dh;
                        mean_dx += dh * xh[k];
                    }
                    mean_d /= m as f64;
                    mean_dx /= m as f64;
                    for k in 0..m {
                        let dh = grow[k] * gv.data()[k];
                        dx[r * m + k] = rstd[r] * (dh - mean_d - xh[k] * mean_dx);
                    }
                }
                acc(*x, Tensor::new(out.shape().to_vec(), dx).expect("shape"));
                let gshape = gv.shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                acc(*gain, Tensor::new(gshape, dgain).expect("shape"));
                acc(*bias, Tensor::new(bshape, dbias).expect("shape"));
            }
            Op::GatherRows(table, indices) => {
                let tv = self.value(*table);
                let m = tv.cols();
                let mut d = Tensor::zeros(tv.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for k in 0..m {
                        d.data_mut()[i * m + k] += g.data()[r * m + k];
                    }
                }
                acc(*table, d);
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let d = g.data()[off * c..(off + rows) * c].to_vec();
                    acc(p, Tensor::new(vec![rows, c], d).expect("shape"));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let d = (0..rows)
                        .flat_map(|i| g.data()[i * total + off..i * total + off + c].iter().copied())
                        .collect();
                    acc(p, Tensor::new(vec![rows, c], d).expect("shape"));
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut d = Tensor::zeros(av.shape());
                d.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (c, len) = (av.cols(), out.cols());
                let mut d = Tensor::zeros(av.shape());
                for i in 0..av.rows() {
                    d.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.reshaped(shape).expect("shape"));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::filled(&shape, g.data()[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let v = g.data()[0] / av.numel() as f64;
                acc(*a, Tensor::filled(av.shape(), v));
            }
            Op::Mse(pred, target) => {
                let pv = self.value(*pred);
                let n = pv.numel() as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| g.data()[0] * 2.0 * (p - t) / n)
                    .collect();
                acc(*pred, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
            }
            Op::Smape(pred, target, floor) => {
                let pv = self.value(*pred);
                let scale = g.data()[0] * 200.0 / pv.numel() as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        let diff = p - y;
                        let s = y.abs() + p.abs();
                        let sd = diff.signum() * (diff != 0.0) as u8 as f64;
                        if s > *floor {
                            let sp = p.signum() * (p != 0.0) as u8 as f64;
                            scale * (sd / s - diff.abs() * sp / (s * s))
                        } else {
                            scale * sd / floor
                        }
                    })
                    .collect();
                acc(*pred, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
            }
            Op::CrossEntropy(logits, class) => {
                let lv = self.value(*logits);
                let mut probs = vec![0.0; lv.numel()];
                softmax_row(lv.data(), &mut probs);
                probs[*class] -= 1.0;
                let d = probs.iter().map(|p| p * g.data()[0]).collect();
                acc(*logits, Tensor::new(lv.shape().to_vec(), d).expect("shape"));
            }
            Op::EdgeWeights {
                nodes,
                edges,
                group_cosine,
            } => {
                let d = graph::group_weights_backward(self.value(*nodes), edges, group_cosine, g);
                acc(*nodes, d);
            }
            Op::SymNormalize(a, degree) => {
                acc(*a, graph::sym_normalize_backward(out, degree, g));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let b = tape.constant(t(&[vec![5.0], vec![6.0]])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.5, -2.0], vec![0.25, 4.0]])).unwrap();
        let i = tape.constant(Tensor::identity(2)).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_values_and_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gelu_origin() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0)).unwrap();
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![0.0, 0.0], vec![0.0, 3f64.ln()]])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((v.get(1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 9.0], vec![0.0, 0.0]])).unwrap();
        let y = tape.causal_softmax(x).unwrap();
        assert_eq!(tape.value(y).row(0), &[1.0, 0.0]);
        assert_eq!(tape.value(y).row(1), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![3.0, 3.0], vec![1.0, -1.0]])).unwrap();
        let one = tape.constant(Tensor::filled(&[2], 1.0)).unwrap();
        let zero = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0]);
        let tiny = tape.layer_norm(x, one, zero, 1e-300).unwrap();
        assert_eq!(tape.value(tiny).row(1), &[1.0, -1.0]);

        let bias = tape.constant(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()).unwrap();
        let y = tape.layer_norm(x, zero, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.3, -0.7]);
        assert_eq!(tape.value(y).row(1), &[0.3, -0.7]);
    }

    #[test]
    fn square_grad_and_constant_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let c = tape.scale(x, 0.0).unwrap();
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        assert!(tape.sum(x).is_err());
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), true).unwrap();
        let cat = tape.concat_rows(&[x, x, x]).unwrap();
        let s = tape.sum(cat).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e200)).unwrap();
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let same = tape.mse(p, &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0]);
        let m = tape.mse(p, &Tensor::new(vec![2], vec![2.0, 4.0]).unwrap()).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5]);

        let q = tape.constant(Tensor::scalar(3.0)).unwrap();
        let s = tape.smape(q, &Tensor::scalar(1.0), 1e-8).unwrap();
        assert_eq!(tape.value(s).data(), &[100.0]);

        let logits = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let ce = tape.cross_entropy(logits, 1).unwrap();
        assert!((tape.value(ce).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::filled(&[1, 1], 2.0), false);
        let b = store.add("b", Tensor::filled(&[1, 1], 1.0), true);
        let mut tape = Tape::new();
        let wv = tape.param(&store, w).unwrap();
        let bv = tape.param(&store, b).unwrap();
        assert_eq!(tape.param(&store, w).unwrap(), wv);
        let y = tape.mul(wv, bv).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let got: Vec<_> = g.params().map(|(id, _)| id).collect();
        assert_eq!(got, vec![b]);
    }
}
