//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation is appended to the tape together with whatever its
//! backward rule needs (softmax probabilities, normalized activations, ...).
//! Because nodes are only ever appended, index order is a topological order
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! Matrix-shaped operations treat a tensor as `rows × cols`, where `cols` is
//! the last axis and `rows` the product of all leading axes. Several ops take a
//! `block` argument: the row dimension is then a stack of independent
//! sequences of `block` rows each (one per batch item).

use super::tensor::{gemm, Tensor};
use super::{NumericsError, Real};

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    AddTiled(NodeId, NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        block: usize,
        probs: Vec<T>,
    },
    MeanRows {
        x: NodeId,
        block: usize,
    },
    ConcatCols(NodeId, NodeId),
    PrependRow {
        x: NodeId,
        token: NodeId,
        block: usize,
    },
    TakeRow {
        x: NodeId,
        block: usize,
        index: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::AddTiled(..) => "add_tiled",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Attention { .. } => "attention",
            Op::MeanRows { .. } => "mean_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::PrependRow { .. } => "prepend_row",
            Op::TakeRow { .. } => "take_row",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::AddTiled(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::Linear { x, w, b } => {
                let mut p = vec![x, w];
                p.extend(b);
                p
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax { x: a, .. }
            | Op::MeanRows { x: a, .. }
            | Op::TakeRow { x: a, .. }
            | Op::CrossEntropy { logits: a, .. } => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::PrependRow { x, token, .. } => vec![x, token],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation graph for one forward/backward pass.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn require_2d(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match *t {
        [r, c] => Ok((r, c)),
        _ => Err(NumericsError::InvalidArgument(format!(
            "{op} expects a 2-D tensor, got shape {t:?}"
        ))),
    }
}

fn require_block(op: &'static str, rows: usize, block: usize) -> Result<()> {
    if block == 0 || !rows.is_multiple_of(block) {
        return Err(NumericsError::InvalidArgument(format!(
            "{op}: {rows} rows are not a whole number of blocks of {block}"
        )));
    }
    Ok(())
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax over contiguous `len`-element slices, in place.
pub(crate) fn softmax_rows_in_place<T: Real>(values: &mut [T], len: usize) {
    for row in values.chunks_mut(len) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input (a parameter or a point under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", av.shape())?;
        let (k2, n) = require_2d("matmul", bv.shape())?;
        if k != k2 {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(av.data(), false, bv.data(), false, &mut out, m, k, n, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul(a, b))
    }

    /// Dense layer `x·W + b` over the last axis of `x`; leading axes are kept.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (din, dout) = require_2d("linear", wv.shape())?;
        if xv.cols() != din {
            return Err(mismatch("linear", xv.shape(), wv.shape()));
        }
        let rows = xv.rows();
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(mismatch("linear", wv.shape(), bv.shape()));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            xv.data(),
            false,
            wv.data(),
            false,
            &mut out,
            rows,
            din,
            dout,
            true,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (r, c) = require_2d("transpose", av.shape())?;
        let src = av.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(value, Op::Transpose(a))
    }

    /// Adds a `[cols]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &bias) in row.iter_mut().zip(bv.data()) {
                *v += bias;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::AddBias(x, b))
    }

    /// Adds `tile[N×D]` to every block of `N` rows of `x[(B·N)×D]`.
    pub fn add_tiled(&mut self, x: NodeId, tile: NodeId) -> Result<NodeId> {
        let (xv, tv) = (self.value(x), self.value(tile));
        if xv.cols() != tv.cols() || xv.rows() % tv.rows() != 0 {
            return Err(mismatch("add_tiled", xv.shape(), tv.shape()));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(tv.len()) {
            for (v, &t) in chunk.iter_mut().zip(tv.data()) {
                *v += t;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::AddTiled(x, tile))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len)
                    .map(|i| src[idx(i)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[idx(i)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Softmax { x, axis })
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(mismatch("layernorm", xv.shape(), gv.shape()));
        }
        let eps = T::from_f64(eps);
        let inv_n = T::one() / T::from_f64(n as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = vec![T::zero(); xv.len()];
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu(x))
    }

    /// Scaled dot-product attention, `softmax(Q·Kᵀ/√d_k)·V`, evaluated
    /// independently per head and per block of rows.
    ///
    /// `q` and `k` are `[rows × heads·d_k]`, `v` is `[rows × heads·d_v]`; head
    /// `i` owns column range `i·d .. (i+1)·d`. The output is the per-head
    /// results laid side by side, `[rows × heads·d_v]`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        block: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, qc) = require_2d("attention", qv.shape())?;
        let (krows, kc) = require_2d("attention", kv.shape())?;
        let (vrows, vc) = require_2d("attention", vv.shape())?;
        if qc != kc || krows != rows {
            return Err(mismatch("attention", qv.shape(), kv.shape()));
        }
        if vrows != rows {
            return Err(mismatch("attention", kv.shape(), vv.shape()));
        }
        if heads == 0 || qc % heads != 0 || vc % heads != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "attention: {heads} heads do not divide widths {qc}/{vc}"
            )));
        }
        require_block("attention", rows, block)?;
        let (dk, dv, t) = (qc / heads, vc / heads, block);
        let scale = T::one() / T::from_f64(dk as f64).sqrt();
        let nblocks = rows / t;
        let mut probs = vec![T::zero(); nblocks * heads * t * t];
        let mut out = vec![T::zero(); rows * vc];
        let mut qb = vec![T::zero(); t * dk];
        let mut kb = vec![T::zero(); t * dk];
        let mut vb = vec![T::zero(); t * dv];
        let mut ob = vec![T::zero(); t * dv];
        for b in 0..nblocks {
            for h in 0..heads {
                gather(qv.data(), qc, b * t, t, h * dk, dk, &mut qb);
                gather(kv.data(), kc, b * t, t, h * dk, dk, &mut kb);
                gather(vv.data(), vc, b * t, t, h * dv, dv, &mut vb);
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                gemm(&qb, false, &kb, true, p, t, dk, t, false);
                for s in p.iter_mut() {
                    *s *= scale;
                }
                softmax_rows_in_place(p, t);
                gemm(p, false, &vb, false, &mut ob, t, t, dv, false);
                scatter(&ob, &mut out, vc, b * t, t, h * dv, dv, false);
            }
        }
        let value = Tensor::new(vec![rows, vc], out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                block,
                probs,
            },
        )
    }

    /// Mean over each block of `block` rows: `[(B·N)×D] → [B×D]`.
    pub fn mean_rows(&mut self, x: NodeId, block: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        require_block("mean_rows", rows, block)?;
        let inv = T::one() / T::from_f64(block as f64);
        let mut out = vec![T::zero(); rows / block * cols];
        for (r, row) in xv.data().chunks(cols).enumerate() {
            let dst = &mut out[(r / block) * cols..][..cols];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v * inv;
            }
        }
        let value = Tensor::new(vec![rows / block, cols], out)?;
        self.push(value, Op::MeanRows { x, block })
    }

    /// `[r×m] ‖ [r×n] → [r×(m+n)]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(mismatch("concat_cols", av.shape(), bv.shape()));
        }
        let (m, n) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(m).zip(bv.data().chunks(n)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![av.rows(), m + n], out)?;
        self.push(value, Op::ConcatCols(a, b))
    }

    /// Inserts `token[D]` before every block of `block` rows.
    pub fn prepend_row(&mut self, x: NodeId, token: NodeId, block: usize) -> Result<NodeId> {
        let (xv, tv) = (self.value(x), self.value(token));
        let cols = xv.cols();
        if tv.len() != cols {
            return Err(mismatch("prepend_row", xv.shape(), tv.shape()));
        }
        require_block("prepend_row", xv.rows(), block)?;
        let nblocks = xv.rows() / block;
        let mut out = Vec::with_capacity((xv.rows() + nblocks) * cols);
        for chunk in xv.data().chunks(block * cols) {
            out.extend_from_slice(tv.data());
            out.extend_from_slice(chunk);
        }
        let value = Tensor::new(vec![xv.rows() + nblocks, cols], out)?;
        self.push(value, Op::PrependRow { x, token, block })
    }

    /// Selects row `index` of every block: `[(B·M)×D] → [B×D]`.
    pub fn take_row(&mut self, x: NodeId, block: usize, index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = xv.cols();
        require_block("take_row", xv.rows(), block)?;
        if index >= block {
            return Err(NumericsError::InvalidArgument(format!(
                "take_row: index {index} outside block of {block}"
            )));
        }
        let out: Vec<T> = xv
            .data()
            .chunks(block * cols)
            .flat_map(|chunk| chunk[index * cols..(index + 1) * cols].iter().copied())
            .collect();
        let value = Tensor::new(vec![xv.rows() / block, cols], out)?;
        self.push(value, Op::TakeRow { x, block, index })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::from_f64(xv.len() as f64));
        self.push(value, Op::Mean(x))
    }

    /// Mean over rows of `−log softmax(logits_row)[label]`.
    ///
    /// `logits` is `[C]` (one example) or `[B×C]`; `labels` has one entry per row.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if labels.len() != rows {
            return Err(NumericsError::InvalidArgument(format!(
                "cross_entropy: {} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(NumericsError::LabelOutOfRange { label, classes: c });
        }
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (row, (src, &label)) in lv.data().chunks(c).zip(labels).enumerate() {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = src.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - src[label];
            softmax_rows_in_place(&mut probs[row * c..(row + 1) * c], c);
        }
        let value = Tensor::scalar(loss / T::from_f64(rows as f64));
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaf_grads[idx] = Some(g);
                continue;
            }
            self.backward_node(node, g, &mut grads)?;
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(g.data(), false, bv.data(), true, &mut da, m, n, k, false);
                    accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(av.data(), true, g.data(), false, &mut db, k, m, n, false);
                    accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            &Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if self.needs(x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(
                        g.data(),
                        false,
                        wv.data(),
                        true,
                        &mut dx,
                        rows,
                        dout,
                        din,
                        false,
                    );
                    accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.needs(w) {
                    let mut dw = vec![T::zero(); din * dout];
                    gemm(
                        xv.data(),
                        true,
                        g.data(),
                        false,
                        &mut dw,
                        din,
                        rows,
                        dout,
                        false,
                    );
                    accumulate(grads, w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let db = column_sums(g.data(), dout);
                        accumulate(grads, b, Tensor::new(self.value(b).shape().to_vec(), db)?);
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.needs(b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    accumulate(grads, b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            &Op::Scale(a, c) => {
                if self.needs(a) {
                    accumulate(grads, a, g.map(|v| v * c));
                }
            }
            &Op::Transpose(a) => {
                if self.needs(a) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let mut d = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] = g.data()[i * c + j];
                        }
                    }
                    accumulate(grads, a, Tensor::new(vec![c, r], d)?);
                }
            }
            &Op::AddBias(x, b) => {
                if self.needs(b) {
                    let bv = self.value(b);
                    let db = column_sums(g.data(), out.cols());
                    accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                if self.needs(x) {
                    accumulate(grads, x, g);
                }
            }
            &Op::AddTiled(x, tile) => {
                if self.needs(tile) {
                    let tv = self.value(tile);
                    let mut dt = vec![T::zero(); tv.len()];
                    for chunk in g.data().chunks(tv.len()) {
                        for (d, &v) in dt.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(grads, tile, Tensor::new(tv.shape().to_vec(), dt)?);
                }
                if self.needs(x) {
                    accumulate(grads, x, g);
                }
            }
            &Op::Softmax { x, axis } => {
                if self.needs(x) {
                    let (outer, len, inner) = axis_split(out.shape(), axis);
                    let y = out.data();
                    let mut d = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: T = (0..len).map(|i| g.data()[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                d[idx(i)] = y[idx(i)] * (g.data()[idx(i)] - dot);
                            }
                        }
                    }
                    accumulate(grads, x, Tensor::new(out.shape().to_vec(), d)?);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let gv = self.value(*gamma);
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for (grow, hrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += grow[c] * hrow[c];
                        }
                    }
                    accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dg)?);
                }
                if self.needs(*beta) {
                    let db = column_sums(g.data(), n);
                    let bshape = self.value(*beta).shape().to_vec();
                    accumulate(grads, *beta, Tensor::new(bshape, db)?);
                }
                if self.needs(*x) {
                    let nf = T::from_f64(n as f64);
                    let mut dx = vec![T::zero(); out.len()];
                    let mut dh = vec![T::zero(); n];
                    for (r, (grow, hrow)) in g.data().chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for c in 0..n {
                            dh[c] = grow[c] * gv.data()[c];
                        }
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        let k = rstd[r] / nf;
                        for c in 0..n {
                            dx[r * n + c] = k * (nf * dh[c] - sum_dh - hrow[c] * sum_dh_h);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
                }
            }
            &Op::Gelu(x) => {
                if self.needs(x) {
                    let xv = self.value(x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| gi * gelu_derivative(xi))
                        .collect();
                    accumulate(grads, x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                block,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *block, probs, &g, grads)?,
            &Op::MeanRows { x, block } => {
                if self.needs(x) {
                    let xv = self.value(x);
                    let cols = xv.cols();
                    let inv = T::one() / T::from_f64(block as f64);
                    let mut d = vec![T::zero(); xv.len()];
                    for (r, row) in d.chunks_mut(cols).enumerate() {
                        let src = &g.data()[(r / block) * cols..][..cols];
                        for (dv, &s) in row.iter_mut().zip(src) {
                            *dv = s * inv;
                        }
                    }
                    accumulate(grads, x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            &Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, n) = (av.cols(), bv.cols());
                let (mut da, mut db) = (Vec::with_capacity(av.len()), Vec::with_capacity(bv.len()));
                for row in g.data().chunks(m + n) {
                    da.extend_from_slice(&row[..m]);
                    db.extend_from_slice(&row[m..]);
                }
                if self.needs(a) {
                    accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.needs(b) {
                    accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            &Op::PrependRow { x, token, block } => {
                let (xv, tv) = (self.value(x), self.value(token));
                let cols = xv.cols();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dt = vec![T::zero(); cols];
                for chunk in g.data().chunks((block + 1) * cols) {
                    for (d, &s) in dt.iter_mut().zip(&chunk[..cols]) {
                        *d += s;
                    }
                    dx.extend_from_slice(&chunk[cols..]);
                }
                if self.needs(x) {
                    accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.needs(token) {
                    accumulate(grads, token, Tensor::new(tv.shape().to_vec(), dt)?);
                }
            }
            &Op::TakeRow { x, block, index } => {
                if self.needs(x) {
                    let xv = self.value(x);
                    let cols = xv.cols();
                    let mut d = vec![T::zero(); xv.len()];
                    for (b, src) in g.data().chunks(cols).enumerate() {
                        d[(b * block + index) * cols..][..cols].copy_from_slice(src);
                    }
                    accumulate(grads, x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            &Op::Sum(x) => {
                if self.needs(x) {
                    let xv = self.value(x);
                    accumulate(grads, x, Tensor::filled(xv.shape(), g.data()[0]));
                }
            }
            &Op::Mean(x) => {
                if self.needs(x) {
                    let xv = self.value(x);
                    let v = g.data()[0] / T::from_f64(xv.len() as f64);
                    accumulate(grads, x, Tensor::filled(xv.shape(), v));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let c = lv.cols();
                    let s = g.data()[0] / T::from_f64(labels.len() as f64);
                    let mut d = probs.clone();
                    for (row, &label) in labels.iter().enumerate() {
                        d[row * c + label] -= T::one();
                    }
                    for v in d.iter_mut() {
                        *v *= s;
                    }
                    accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        block: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, qc) = (qv.shape()[0], qv.shape()[1]);
        let vc = vv.shape()[1];
        let (dk, dv, t) = (qc / heads, vc / heads, block);
        let scale = T::one() / T::from_f64(dk as f64).sqrt();
        let (need_q, need_k, need_v) = (self.needs(q), self.needs(k), self.needs(v));
        let mut dq = vec![T::zero(); if need_q { qv.len() } else { 0 }];
        let mut dkk = vec![T::zero(); if need_k { kv.len() } else { 0 }];
        let mut dvv = vec![T::zero(); if need_v { vv.len() } else { 0 }];
        let mut qb = vec![T::zero(); t * dk];
        let mut kb = vec![T::zero(); t * dk];
        let mut vb = vec![T::zero(); t * dv];
        let mut gob = vec![T::zero(); t * dv];
        let mut dp = vec![T::zero(); t * t];
        let mut tmp_k = vec![T::zero(); t * dk];
        let mut tmp_v = vec![T::zero(); t * dv];
        for b in 0..rows / t {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * t * t..][..t * t];
                gather(g.data(), vc, b * t, t, h * dv, dv, &mut gob);
                if need_v {
                    gemm(p, true, &gob, false, &mut tmp_v, t, t, dv, false);
                    scatter(&tmp_v, &mut dvv, vc, b * t, t, h * dv, dv, true);
                }
                if !(need_q || need_k) {
                    continue;
                }
                gather(vv.data(), vc, b * t, t, h * dv, dv, &mut vb);
                gemm(&gob, false, &vb, true, &mut dp, t, dv, t, false);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√d_k factor.
                for (prow, drow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                if need_q {
                    gather(kv.data(), qc, b * t, t, h * dk, dk, &mut kb);
                    gemm(&dp, false, &kb, false, &mut tmp_k, t, t, dk, false);
                    scatter(&tmp_k, &mut dq, qc, b * t, t, h * dk, dk, true);
                }
                if need_k {
                    gather(qv.data(), qc, b * t, t, h * dk, dk, &mut qb);
                    gemm(&dp, true, &qb, false, &mut tmp_k, t, t, dk, false);
                    scatter(&tmp_k, &mut dkk, qc, b * t, t, h * dk, dk, true);
                }
            }
        }
        if need_q {
            accumulate(grads, q, Tensor::new(qv.shape().to_vec(), dq)?);
        }
        if need_k {
            accumulate(grads, k, Tensor::new(kv.shape().to_vec(), dkk)?);
        }
        if need_v {
            accumulate(grads, v, Tensor::new(vv.shape().to_vec(), dvv)?);
        }
        Ok(())
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf id.
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; leaves not on a path to the loss get zeros.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn column_sums<T: Real>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in data.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Copies the `rows × width` window at (`row0`, `col0`) out of a row-major
/// matrix with `stride` columns.
fn gather<T: Real>(
    src: &[T],
    stride: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    width: usize,
    dst: &mut [T],
) {
    for r in 0..rows {
        let s = (row0 + r) * stride + col0;
        dst[r * width..(r + 1) * width].copy_from_slice(&src[s..s + width]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter<T: Real>(
    src: &[T],
    dst: &mut [T],
    stride: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    width: usize,
    add: bool,
) {
    for r in 0..rows {
        let d = (row0 + r) * stride + col0;
        let target = &mut dst[d..d + width];
        let source = &src[r * width..(r + 1) * width];
        if add {
            for (t, &s) in target.iter_mut().zip(source) {
                *t += s;
            }
        } else {
            target.copy_from_slice(source);
        }
    }
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}
