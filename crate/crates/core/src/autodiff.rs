//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive in the order it is applied, so node
//! ids are already a topological order. [`Graph::backward`] walks the tape
//! once in exact reverse and returns a gradient for every named parameter
//! that was registered with [`Graph::param`].

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{gemm_a_bt, gemm_at_b, Mask, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tensors addressed by name, in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    tensors: BTreeMap<String, Tensor>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        NamedTensors {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Adds `other` into `self`, inserting names that are missing.
    pub fn accumulate(&mut self, other: &NamedTensors) {
        for (name, t) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(acc) => acc.add_assign(t),
                None => {
                    self.tensors.insert(name.clone(), t.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Transpose(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gather(NodeId, Vec<usize>),
    MeanRows(NodeId, Vec<usize>),
    Sum(NodeId),
    CrossEntropy(NodeId, usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Parameters are borrowed, not copied.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<String, NodeId>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers a trainable tensor. Repeated registration of one name
    /// returns the same node.
    pub fn param(&mut self, name: &str, t: &'a Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        self.params.insert(name.to_string(), id);
        id
    }

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        id
    }

    /// Outputs of every softmax recorded so far, in tape order.
    pub fn softmax_outputs(&self) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax(..)))
            .map(|n| n.value.as_ref())
            .collect()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Transpose(a)
            | Op::Gather(a, _)
            | Op::MeanRows(a, _)
            | Op::Sum(a)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + bias {:?}", va.shape(), vb.shape()),
            ));
        }
        let n = va.cols();
        let b = vb.data();
        let data = va.data().iter().enumerate().map(|(i, x)| x + b[i % n]).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("add_row_bias", out, Op::AddRowBias(a, bias))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect());
        self.push("scale", out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x.max(0.0)).collect());
        self.push("relu", out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| gelu(x)).collect());
        self.push("gelu", out, Op::Gelu(a))
    }

    /// Row-wise softmax. Masked entries come out exactly zero; a row with no
    /// unmasked entry is an error.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Mask>) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        if let Some(mask) = &mask {
            if mask.rows() != m || mask.cols() != n {
                return Err(Error::InvalidMask(format!(
                    "mask {}x{} for scores {m}x{n}",
                    mask.rows(),
                    mask.cols()
                )));
            }
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = va.row(r);
            let keep = |j: usize| mask.as_ref().map_or(true, |mk| mk.row(r)[j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidMask(format!("row {r} is fully masked")));
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), out);
        self.push("softmax_rows", out, Op::Softmax(a))
    }

    /// Stacks matrices with equal column counts, preserving row order.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {cols} columns", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start >= end || end > va.rows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {} rows", va.rows())));
        }
        let c = va.cols();
        let out = Tensor::from_parts(vec![end - start, c], va.data()[start * c..end * c].to_vec());
        self.push("slice_rows", out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start >= end || end > va.cols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {} cols", va.cols())));
        }
        let mut data = Vec::with_capacity(va.rows() * (end - start));
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row(r)[start..end]);
        }
        let out = Tensor::from_parts(vec![va.rows(), end - start], data);
        self.push("slice_cols", out, Op::SliceCols(a, start))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols();
        if vg.len() != n || vb.len() != n {
            return Err(Error::shape("layer_norm", format!("width {n}, gain {:?}", vg.shape())));
        }
        let mut data = Vec::with_capacity(vx.len());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let (mean, rstd) = row_stats(row);
            for j in 0..n {
                data.push((row[j] - mean) * rstd * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias })
    }

    /// Row lookup, as used for embeddings.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.rows()) {
            return Err(Error::shape("gather_rows", format!("id {bad} >= {} rows", vt.rows())));
        }
        let mut data = Vec::with_capacity(ids.len() * vt.cols());
        for &i in ids {
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::from_parts(vec![ids.len(), vt.cols()], data);
        self.push("gather_rows", out, Op::Gather(table, ids.to_vec()))
    }

    /// Arithmetic mean over the listed rows, as a `1 x n` matrix.
    pub fn mean_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if rows.is_empty() {
            return Err(Error::InvalidMask("mean over an empty row set".into()));
        }
        if rows.iter().any(|&r| r >= va.rows()) {
            return Err(Error::shape("mean_rows", "row index out of range"));
        }
        let n = va.cols();
        let mut acc = vec![0.0; n];
        for &r in rows {
            for (o, v) in acc.iter_mut().zip(va.row(r)) {
                *o += v;
            }
        }
        let count = rows.len() as f64;
        for o in &mut acc {
            *o /= count;
        }
        let out = Tensor::from_parts(vec![1, n], acc);
        self.push("mean_rows", out, Op::MeanRows(a, rows.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rows() != 1 || label >= v.cols() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, label {label}", v.shape()),
            ));
        }
        let row = v.data();
        let out = Tensor::scalar(log_sum_exp(row) - row[label]);
        self.push("cross_entropy", out, Op::CrossEntropy(logits, label))
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<NamedTensors> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = NamedTensors::new();
        for (name, &id) in &self.params {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_a_bt(gd, vb.data(), &mut da, m, n, k);
                    accumulate(grads, *a, va.shape(), da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_at_b(va.data(), gd, &mut db, m, k, n);
                    accumulate(grads, *b, vb.shape(), db);
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.needs(*x) {
                        accumulate(grads, *x, g.shape(), gd.to_vec());
                    }
                }
            }
            Op::AddRowBias(a, bias) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if self.needs(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (o, v) in db.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, self.value(*bias).shape(), db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, va.shape(), d);
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, vb.shape(), d);
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, g.shape(), gd.iter().map(|x| x * s).collect());
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = gd
                    .iter()
                    .zip(va.data())
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, va.shape(), d);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let d = gd.iter().zip(va.data()).map(|(x, &v)| x * gelu_grad(v)).collect();
                accumulate(grads, *a, va.shape(), d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, y.shape(), d);
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.rows() * n;
                    if self.needs(p) {
                        accumulate(grads, p, vp.shape(), gd[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(vp.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[col..col + w]);
                        }
                        accumulate(grads, p, vp.shape(), d);
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut d = vec![0.0; va.len()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(grads, *a, va.shape(), d);
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let c = va.cols();
                let w = g.cols();
                let mut d = vec![0.0; va.len()];
                for r in 0..va.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, va.shape(), d);
            }
            Op::Transpose(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, va.shape(), g.transpose().into_data());
            }
            Op::LayerNorm { x, gain, bias } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let n = vx.cols();
                let mut dx = vec![0.0; vx.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..vx.rows() {
                    let row = vx.row(r);
                    let gr = g.row(r);
                    let (mean, rstd) = row_stats(row);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * vg.data()[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, vx.shape(), dx);
                }
                if self.needs(*gain) {
                    accumulate(grads, *gain, vg.shape(), dg);
                }
                if self.needs(*bias) {
                    accumulate(grads, *bias, self.value(*bias).shape(), db);
                }
            }
            Op::Gather(table, ids) => {
                let vt = self.value(*table);
                let c = vt.cols();
                let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(vt.shape()));
                let dst = slot.data_mut();
                for (r, &i) in ids.iter().enumerate() {
                    for (o, v) in dst[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::MeanRows(a, rows) => {
                let va = self.value(*a);
                let c = va.cols();
                let count = rows.len() as f64;
                let mut d = vec![0.0; va.len()];
                for &r in rows {
                    for (o, v) in d[r * c..(r + 1) * c].iter_mut().zip(gd) {
                        *o += v / count;
                    }
                }
                accumulate(grads, *a, va.shape(), d);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, va.shape(), vec![gd[0]; va.len()]);
            }
            Op::CrossEntropy(a, label) => {
                let va = self.value(*a);
                let row = va.data();
                let lse = log_sum_exp(row);
                let d = row
                    .iter()
                    .enumerate()
                    .map(|(j, &z)| {
                        let p = (z - lse).exp();
                        gd[0] * (p - if j == *label { 1.0 } else { 0.0 })
                    })
                    .collect();
                accumulate(grads, *a, va.shape(), d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], d: Vec<f64>) {
    match &mut grads[id.0] {
        Some(t) => {
            for (o, v) in t.data_mut().iter_mut().zip(&d) {
                *o += v;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), d)),
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        let y = g.softmax_rows(x, None).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[0.5, 0.5]);
        assert!((v.get(1, 0) - 1.0).abs() < 1e-15 && v.get(1, 1) < 1e-300);

        let x = g.constant(t(&[&[1.0, 2.0, 3.0]]));
        let y = g.softmax_rows(x, None).unwrap();
        // e^(x_i) / sum e^(x_j), summed directly without max-shift
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, xv) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((g.value(y).get(0, j) - xv.exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_mask_contract() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[3.0, -1.0, 2.0]]));
        let mask = Mask::new(1, 3, vec![true, false, true]).unwrap();
        let y = g.softmax_rows(x, Some(mask)).unwrap();
        assert_eq!(g.value(y).get(0, 1), 0.0);
        assert!((g.value(y).sum() - 1.0).abs() < 1e-12);

        let full = Mask::new(1, 3, vec![false; 3]).unwrap();
        assert!(matches!(g.softmax_rows(x, Some(full)), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(gelu(0.0), 0.0);

        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t(&[&[5.0, 6.0]]));
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        assert_eq!(g.value(c).row(2), &[5.0, 6.0]);
        assert_eq!(g.value(c).row(0), &[1.0, 2.0]);

        let bad = g.constant(t(&[&[1.0, 2.0, 3.0]]));
        assert!(g.concat_rows(&[a, bad]).is_err());
        assert!(g.add(a, bad).is_err());
        assert!(g.matmul(a, bad).is_err());
    }

    #[test]
    fn backward_basic_cases() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let p = Tensor::vector(vec![5.0]).unwrap();
        let mut g = Graph::new();
        let xn = g.param("x", &x);
        let _pn = g.param("p", &p);
        let sq = g.mul(xn, xn).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
        assert_eq!(grads.get("p").unwrap().data(), &[0.0]);

        assert!(g.backward(sq).is_ok()); // shape [1] is still scalar
        let two = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let v = g.param("v", &two);
        assert!(matches!(g.backward(v), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&mut rng, &[3, 2]);
        let x1 = random(&mut rng, &[4, 3]);
        let x2 = random(&mut rng, &[4, 3]);

        let single = |x: &Tensor| {
            let mut g = Graph::new();
            let wn = g.param("w", &w);
            let xn = g.constant(x.clone());
            let y = g.matmul(xn, wn).unwrap();
            let z = g.gelu(y).unwrap();
            let l = g.sum(z).unwrap();
            g.backward(l).unwrap()
        };
        let mut separate = single(&x1);
        separate.accumulate(&single(&x2));

        let mut g = Graph::new();
        let wn = g.param("w", &w);
        let mut losses = vec![];
        for x in [&x1, &x2] {
            let xn = g.constant(x.clone());
            let y = g.matmul(xn, wn).unwrap();
            let z = g.gelu(y).unwrap();
            losses.push(g.sum(z).unwrap());
        }
        let total = g.add(losses[0], losses[1]).unwrap();
        let joint = g.backward(total).unwrap();
        assert_eq!(joint.get("w").unwrap(), separate.get("w").unwrap());
    }

    /// Builds a loss that touches every primitive on the tape.
    fn every_op_loss(p: &NamedTensors) -> (f64, NamedTensors) {
        let mut g = Graph::new();
        let w = g.param("w", p.get("w").unwrap());
        let b = g.param("b", p.get("b").unwrap());
        let table = g.param("table", p.get("table").unwrap());
        let gain = g.param("gain", p.get("gain").unwrap());
        let beta = g.param("beta", p.get("beta").unwrap());
        let x = g.gather_rows(table, &[2, 0, 2, 1]).unwrap();
        let x = g.layer_norm(x, gain, beta).unwrap();
        let h = g.matmul(x, w).unwrap();
        let h = g.add_row_bias(h, b).unwrap();
        let a = g.slice_cols(h, 0, 2).unwrap();
        let c = g.slice_cols(h, 2, 4).unwrap();
        let ga = g.gelu(a).unwrap();
        let gate = g.mul(ga, c).unwrap();
        let ht = g.transpose(h).unwrap();
        let scores = g.matmul(h, ht).unwrap();
        let scores = g.scale(scores, 0.5).unwrap();
        let mask = Mask::key_padding(4, &[true, true, false, true]);
        let attn = g.softmax_rows(scores, Some(mask)).unwrap();
        let mixed = g.matmul(attn, gate).unwrap();
        let r = g.relu(mixed).unwrap();
        let top = g.slice_rows(r, 0, 2).unwrap();
        let stacked = g.concat_rows(&[top, gate]).unwrap();
        let both = g.concat_cols(&[stacked, stacked]).unwrap();
        let both = g.add(both, both).unwrap();
        let pooled = g.mean_rows(both, &[0, 1, 3, 5]).unwrap();
        let logits = g.slice_cols(pooled, 1, 3).unwrap();
        let ce = g.cross_entropy(logits, 1).unwrap();
        let s = g.sum(pooled).unwrap();
        let loss = g.add(ce, s).unwrap();
        (g.value(loss).item().unwrap(), g.backward(loss).unwrap())
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = NamedTensors::new();
        p.insert("w", random(&mut rng, &[3, 4]));
        p.insert("b", random(&mut rng, &[4]));
        p.insert("table", random(&mut rng, &[3, 3]));
        p.insert("gain", random(&mut rng, &[3]));
        p.insert("beta", random(&mut rng, &[3]));
        let (_, analytic) = every_op_loss(&p);
        let numeric = finite_difference_grad(|q| every_op_loss(q).0, &p, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
