//! Reverse-mode tape over whole-tensor operations.
//!
//! Forward calls validate shapes, compute the result eagerly, and append an
//! op record; [`Tape::backward`] walks the records once in reverse,
//! propagating gradients from a scalar loss to every reachable value and
//! depositing parameter gradients into the owning [`ParamSet`]. Every
//! backward rule here is exercised against central finite differences in
//! the test suites.

use super::batchnorm::BatchNormState;
use super::param::{ParamId, ParamSet};
use super::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use std::sync::Arc;

/// Handle to a value stored on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Where batch-norm statistics are taken from: each channel's contiguous
/// H·W plane of a (C, H, W) map, or each column of a (B, C) row batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BnLayout {
    Spatial,
    Rows,
}

/// Saved per-anchor decision of the batch-hard triplet loss.
#[derive(Clone, Debug)]
struct TripletChoice {
    anchor: usize,
    pos: usize,
    neg: usize,
    dp: f64,
    dn: f64,
    active: bool,
}

enum Op {
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    Transpose { x: ValueId, out: ValueId },
    Reshape { x: ValueId, out: ValueId },
    /// (C, H, W) map → (N, C) node matrix, node id = row-major pixel index.
    TransfToNodes { x: ValueId, out: ValueId },
    /// (N, C) node matrix → (C, H, W) map.
    TransfToMap { x: ValueId, out: ValueId },
    Relu { x: ValueId, out: ValueId },
    RowSoftmax { x: ValueId, out: ValueId },
    MaskedRowSoftmax { x: ValueId, out: ValueId, adj: Arc<Adjacency> },
    MaskMul { x: ValueId, out: ValueId, adj: Arc<Adjacency> },
    AddRowBroadcast { x: ValueId, bias: ValueId, out: ValueId },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        out: ValueId,
        layout: BnLayout,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    ScalarMix { a: ValueId, x: ValueId, y: ValueId, out: ValueId, alpha: f64 },
    GlobalAvgPool { x: ValueId, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Scale { x: ValueId, factor: f64, out: ValueId },
    Sum { x: ValueId, out: ValueId },
    ConcatRows { xs: Vec<ValueId>, out: ValueId },
    ConcatMaps { xs: Vec<ValueId>, out: ValueId },
    MapBlock { x: ValueId, out: ValueId, index: usize, h: usize },
    RowBlock { x: ValueId, out: ValueId, index: usize, rows: usize },
    IdLoss { logits: ValueId, out: ValueId, labels: Vec<usize>, eps: f64, probs: Vec<f64> },
    TripletLoss { emb: ValueId, out: ValueId, choices: Vec<TripletChoice>, valid: usize },
    CenterLoss { emb: ValueId, centers: ValueId, out: ValueId, labels: Vec<usize> },
}

/// Gradients of one backward pass, indexed by [`ValueId`]. Values the loss
/// does not depend on have no entry.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Single-writer recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    sources: Vec<Option<ParamId>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of values recorded so far.
    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Convenience accessor for scalar results (panics on non-scalars).
    pub fn scalar_value(&self, id: ValueId) -> f64 {
        let t = &self.vals[id.0];
        assert_eq!(t.numel(), 1, "scalar_value on a non-scalar");
        t.data()[0]
    }

    /// Registers a constant input (no gradient destination).
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        self.push(t, None)
    }

    /// Snapshots a parameter's current value onto the tape; gradients
    /// reaching this value are deposited into the parameter on backward.
    pub fn param(&mut self, id: ParamId, params: &ParamSet) -> ValueId {
        self.push(params.value(id).clone(), Some(id))
    }

    fn push(&mut self, t: Tensor, source: Option<ParamId>) -> ValueId {
        self.vals.push(t);
        self.sources.push(source);
        ValueId(self.vals.len() - 1)
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.vals[id.0].shape()
    }

    fn want_rank(&self, id: ValueId, rank: usize, context: &str) -> Result<()> {
        if self.shape(id).len() != rank {
            return Err(Error::InvalidShape {
                context: context.into(),
                shape: self.shape(id).to_vec(),
                reason: format!("expected rank {rank}"),
            });
        }
        Ok(())
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// (m, k) × (k, n) → (m, n).
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.want_rank(a, 2, "matmul lhs")?;
        self.want_rank(b, 2, "matmul rhs")?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul".into(),
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.vals[a.0].data(), self.vals[b.0].data(), m, k, n, &mut out);
        let out = self.push(Tensor::new(&[m, n], out)?, None);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    /// (r, c) → (c, r), explicitly permuted into a new buffer.
    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        self.want_rank(x, 2, "transpose")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let out = self.push(Tensor::new(&[c, r], out)?, None);
        self.ops.push(Op::Transpose { x, out });
        Ok(out)
    }

    /// Same buffer under a new shape (no reorder).
    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.vals[x.0].reshape(shape)?;
        let out = self.push(t, None);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    // ── Map ↔ node-matrix conversion ────────────────────────────────────

    /// (C, H, W) feature map → (N, C) node matrix with N = H·W and node
    /// id = `row * W + col`. A pure (recorded) permutation of the buffer.
    pub fn transf_to_nodes(&mut self, x: ValueId) -> Result<ValueId> {
        self.want_rank(x, 3, "transf_to_nodes")?;
        let s = self.shape(x).to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for n in 0..hw {
                out[n * c + ch] = xd[ch * hw + n];
            }
        }
        let out = self.push(Tensor::new(&[hw, c], out)?, None);
        self.ops.push(Op::TransfToNodes { x, out });
        Ok(out)
    }

    /// (N, C) node matrix → (C, H, W) map for a declared spatial size.
    /// N must equal `h * w` — the node matrix alone does not determine the
    /// spatial extents.
    pub fn transf_to_map(&mut self, x: ValueId, h: usize, w: usize) -> Result<ValueId> {
        self.want_rank(x, 2, "transf_to_map")?;
        let (n, c) = (self.shape(x)[0], self.shape(x)[1]);
        if n != h * w {
            return Err(Error::InvalidShape {
                context: "transf_to_map".into(),
                shape: self.shape(x).to_vec(),
                reason: format!("declared spatial size {h}x{w} needs {} nodes, matrix has {n}", h * w),
            });
        }
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; c * n];
        for node in 0..n {
            for ch in 0..c {
                out[ch * n + node] = xd[node * c + ch];
            }
        }
        let out = self.push(Tensor::new(&[c, h, w], out)?, None);
        self.ops.push(Op::TransfToMap { x, out });
        Ok(out)
    }

    // ── Pointwise and reductions ────────────────────────────────────────

    /// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let t = Tensor::new(
            self.shape(x).to_vec().as_slice(),
            self.vals[x.0].data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        let out = self.push(t, None);
        self.ops.push(Op::Relu { x, out });
        Ok(out)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "add")?;
        let t = Tensor::new(
            self.shape(a).to_vec().as_slice(),
            self.vals[a.0]
                .data()
                .iter()
                .zip(self.vals[b.0].data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        let out = self.push(t, None);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    /// Elementwise (Hadamard) product; shapes must match.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "mul")?;
        let t = Tensor::new(
            self.shape(a).to_vec().as_slice(),
            self.vals[a.0]
                .data()
                .iter()
                .zip(self.vals[b.0].data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        let out = self.push(t, None);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let t = Tensor::new(
            self.shape(x).to_vec().as_slice(),
            self.vals[x.0].data().iter().map(|&v| v * factor).collect(),
        )?;
        let out = self.push(t, None);
        self.ops.push(Op::Scale { x, factor, out });
        Ok(out)
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let s: f64 = self.vals[x.0].data().iter().sum();
        let out = self.push(Tensor::scalar(s), None);
        self.ops.push(Op::Sum { x, out });
        Ok(out)
    }

    fn same_shape(&self, a: ValueId, b: ValueId, context: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Softmax family ──────────────────────────────────────────────────

    /// Row-wise softmax over every entry of a (r, c) matrix, stabilized by
    /// subtracting each row's maximum.
    pub fn row_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        self.want_rank(x, 2, "row_softmax")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[i * c + j] /= denom;
            }
        }
        let out = self.push(Tensor::new(&[r, c], out)?, None);
        self.ops.push(Op::RowSoftmax { x, out });
        Ok(out)
    }

    /// Row-wise softmax restricted to each row's adjacency support, as if
    /// off-support scores were −∞: off-support outputs are exactly 0.0 and
    /// never exponentiated, supported entries of a row sum to 1, and a row
    /// with empty support is all zeros.
    pub fn masked_row_softmax(&mut self, x: ValueId, adj: &Arc<Adjacency>) -> Result<ValueId> {
        self.want_square_against(x, adj, "masked_row_softmax")?;
        let n = adj.n();
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let support = adj.neighbors(i);
            if support.is_empty() {
                continue;
            }
            let m = support
                .iter()
                .map(|&j| xd[i * n + j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &j in support {
                let e = (xd[i * n + j] - m).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for &j in support {
                out[i * n + j] /= denom;
            }
        }
        let out_id = self.push(Tensor::new(&[n, n], out)?, None);
        self.ops.push(Op::MaskedRowSoftmax { x, out: out_id, adj: Arc::clone(adj) });
        Ok(out_id)
    }

    /// Elementwise product with the adjacency's 0/1 dense view. Building
    /// block of the literal softmax mode, where the masked product is then
    /// exponentiated over the whole row.
    pub fn mask_mul(&mut self, x: ValueId, adj: &Arc<Adjacency>) -> Result<ValueId> {
        self.want_square_against(x, adj, "mask_mul")?;
        let n = adj.n();
        let xd = self.vals[x.0].data();
        let dense = adj.dense();
        let out: Vec<f64> = xd
            .iter()
            .zip(dense)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        let out_id = self.push(Tensor::new(&[n, n], out)?, None);
        self.ops.push(Op::MaskMul { x, out: out_id, adj: Arc::clone(adj) });
        Ok(out_id)
    }

    fn want_square_against(&self, x: ValueId, adj: &Adjacency, context: &str) -> Result<()> {
        self.want_rank(x, 2, context)?;
        let s = self.shape(x);
        if s[0] != s[1] || s[0] != adj.n() {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                lhs: s.to_vec(),
                rhs: vec![adj.n(), adj.n()],
            });
        }
        Ok(())
    }

    // ── Broadcast / pooling / mixing ────────────────────────────────────

    /// (r, c) + (c) with the bias added to every row.
    pub fn add_row_broadcast(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        self.want_rank(x, 2, "add_row_broadcast lhs")?;
        self.want_rank(bias, 1, "add_row_broadcast bias")?;
        let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(bias)[0] != c {
            return Err(Error::ShapeMismatch {
                context: "add_row_broadcast".into(),
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let xd = self.vals[x.0].data();
        let bd = self.vals[bias.0].data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let out = self.push(Tensor::new(&[r, c], out)?, None);
        self.ops.push(Op::AddRowBroadcast { x, bias, out });
        Ok(out)
    }

    /// Per-pixel linear map over channels: (C, H, W) with weight (C', C)
    /// and bias (C') → (C', H, W). Recorded as exactly the composition
    /// node-matrix → matmul with the transposed weight → bias → map, so it
    /// is bit-identical to spelling those ops out by hand.
    pub fn conv1x1(&mut self, x: ValueId, weight: ValueId, bias: ValueId) -> Result<ValueId> {
        self.want_rank(x, 3, "conv1x1 input")?;
        self.want_rank(weight, 2, "conv1x1 weight")?;
        self.want_rank(bias, 1, "conv1x1 bias")?;
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (cp, cin) = (self.shape(weight)[0], self.shape(weight)[1]);
        if cin != c {
            return Err(Error::ShapeMismatch {
                context: "conv1x1 weight vs input channels".into(),
                lhs: self.shape(weight).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        if self.shape(bias)[0] != cp {
            return Err(Error::ShapeMismatch {
                context: "conv1x1 bias vs weight rows".into(),
                lhs: self.shape(bias).to_vec(),
                rhs: self.shape(weight).to_vec(),
            });
        }
        let nodes = self.transf_to_nodes(x)?;
        let wt = self.transpose(weight)?;
        let prod = self.matmul(nodes, wt)?;
        let biased = self.add_row_broadcast(prod, bias)?;
        self.transf_to_map(biased, h, w)
    }

    /// Convex combination `sigmoid(a) * x + (1 - sigmoid(a)) * y` with a
    /// learnable scalar gate `a`.
    pub fn scalar_mix(&mut self, a: ValueId, x: ValueId, y: ValueId) -> Result<ValueId> {
        if self.vals[a.0].numel() != 1 {
            return Err(Error::InvalidShape {
                context: "scalar_mix gate".into(),
                shape: self.shape(a).to_vec(),
                reason: "gate must be a scalar".into(),
            });
        }
        self.same_shape(x, y, "scalar_mix")?;
        let alpha = super::sigmoid(self.vals[a.0].data()[0]);
        let t = Tensor::new(
            self.shape(x).to_vec().as_slice(),
            self.vals[x.0]
                .data()
                .iter()
                .zip(self.vals[y.0].data())
                .map(|(xv, yv)| alpha * xv + (1.0 - alpha) * yv)
                .collect(),
        )?;
        let out = self.push(t, None);
        self.ops.push(Op::ScalarMix { a, x, y, out, alpha });
        Ok(out)
    }

    /// (C, H, W) → (C): mean over the spatial plane per channel.
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        self.want_rank(x, 3, "global_avg_pool")?;
        let s = self.shape(x).to_vec();
        let (c, m) = (s[0], s[1] * s[2]);
        let xd = self.vals[x.0].data();
        let out: Vec<f64> = (0..c)
            .map(|ch| xd[ch * m..(ch + 1) * m].iter().sum::<f64>() / m as f64)
            .collect();
        let out = self.push(Tensor::new(&[c], out)?, None);
        self.ops.push(Op::GlobalAvgPool { x, out });
        Ok(out)
    }

    /// Stacks rank-2 values with identical column counts along rows.
    pub fn concat_rows(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Invalid("concat_rows needs at least one input".into()));
        }
        for &x in xs {
            self.want_rank(x, 2, "concat_rows")?;
        }
        let cols = self.shape(xs[0])[1];
        let mut rows = 0;
        for &x in xs {
            if self.shape(x)[1] != cols {
                return Err(Error::ShapeMismatch {
                    context: "concat_rows".into(),
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            rows += self.shape(x)[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &x in xs {
            out.extend_from_slice(self.vals[x.0].data());
        }
        let out = self.push(Tensor::new(&[rows, cols], out)?, None);
        self.ops.push(Op::ConcatRows { xs: xs.to_vec(), out });
        Ok(out)
    }

    /// Stacks equal-shape (C, H, W) maps along the height axis into one
    /// (C, B·H, W) map, so a single spatial normalization pass sees the
    /// pooled statistics of the whole batch. [`Tape::map_block`] is the
    /// inverse that slices one sample back out.
    pub fn concat_maps(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::Invalid("concat_maps needs at least one input".into()));
        }
        for &x in xs {
            self.want_rank(x, 3, "concat_maps")?;
        }
        let shape = self.shape(xs[0]).to_vec();
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "concat_maps".into(),
                    lhs: shape.clone(),
                    rhs: self.shape(x).to_vec(),
                });
            }
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let b = xs.len();
        let plane = h * w;
        let mut out = vec![0.0; c * b * plane];
        for (bi, &x) in xs.iter().enumerate() {
            let data = self.vals[x.0].data();
            for ch in 0..c {
                let dst = ch * b * plane + bi * plane;
                out[dst..dst + plane].copy_from_slice(&data[ch * plane..(ch + 1) * plane]);
            }
        }
        let out = self.push(Tensor::new(&[c, b * h, w], out)?, None);
        self.ops.push(Op::ConcatMaps { xs: xs.to_vec(), out });
        Ok(out)
    }

    /// Slices block `index` of height `h` out of a (C, B·H, W) map built by
    /// [`Tape::concat_maps`], recovering that sample's (C, h, W) map.
    pub fn map_block(&mut self, x: ValueId, index: usize, h: usize) -> Result<ValueId> {
        self.want_rank(x, 3, "map_block")?;
        let shape = self.shape(x).to_vec();
        let (c, total, w) = (shape[0], shape[1], shape[2]);
        if h == 0 || total % h != 0 {
            return Err(Error::InvalidShape {
                context: "map_block".into(),
                shape,
                reason: format!("height {total} does not divide into blocks of {h}"),
            });
        }
        let blocks = total / h;
        if index >= blocks {
            return Err(Error::Invalid(format!(
                "map_block index {index} out of range for {blocks} blocks"
            )));
        }
        let plane = h * w;
        let mut out = vec![0.0; c * plane];
        let data = self.vals[x.0].data();
        for ch in 0..c {
            let src = ch * blocks * plane + index * plane;
            out[ch * plane..(ch + 1) * plane].copy_from_slice(&data[src..src + plane]);
        }
        let out_id = self.push(Tensor::new(&[c, h, w], out)?, None);
        self.ops.push(Op::MapBlock { x, out: out_id, index, h });
        Ok(out_id)
    }

    /// Slices rows `index·rows .. (index+1)·rows` out of a rank-2 value:
    /// the inverse of [`Tape::concat_rows`] over equal-height blocks.
    pub fn row_block(&mut self, x: ValueId, index: usize, rows: usize) -> Result<ValueId> {
        self.want_rank(x, 2, "row_block")?;
        let shape = self.shape(x).to_vec();
        let (total, cols) = (shape[0], shape[1]);
        if rows == 0 || total % rows != 0 {
            return Err(Error::InvalidShape {
                context: "row_block".into(),
                shape,
                reason: format!("{total} rows do not divide into blocks of {rows}"),
            });
        }
        let blocks = total / rows;
        if index >= blocks {
            return Err(Error::Invalid(format!(
                "row_block index {index} out of range for {blocks} blocks"
            )));
        }
        let start = index * rows * cols;
        let out: Vec<f64> = self.vals[x.0].data()[start..start + rows * cols].to_vec();
        let out_id = self.push(Tensor::new(&[rows, cols], out)?, None);
        self.ops.push(Op::RowBlock { x, out: out_id, index, rows });
        Ok(out_id)
    }

    // ── Batch normalization ─────────────────────────────────────────────

    /// Batch norm over a (C, H, W) map: statistics per channel across its
    /// H·W plane. Training mode uses the batch statistics (biased
    /// variance) and folds them into the running estimates; evaluation
    /// mode uses the running estimates and requires them initialized.
    pub fn batchnorm_spatial(
        &mut self,
        x: ValueId,
        state: &mut BatchNormState,
        params: &ParamSet,
        mode: Mode,
    ) -> Result<ValueId> {
        self.want_rank(x, 3, "batchnorm_spatial")?;
        let s = self.shape(x).to_vec();
        if s[0] != state.channels() {
            return Err(Error::ShapeMismatch {
                context: format!("batchnorm `{}` input channels", state.name()),
                lhs: s,
                rhs: vec![state.channels()],
            });
        }
        self.batchnorm_impl(x, state, params, mode, BnLayout::Spatial)
    }

    /// Batch norm over a (B, C) row batch: statistics per feature across
    /// the B rows. Same training/evaluation semantics as the spatial form.
    pub fn batchnorm_rows(
        &mut self,
        x: ValueId,
        state: &mut BatchNormState,
        params: &ParamSet,
        mode: Mode,
    ) -> Result<ValueId> {
        self.want_rank(x, 2, "batchnorm_rows")?;
        let s = self.shape(x).to_vec();
        if s[1] != state.channels() {
            return Err(Error::ShapeMismatch {
                context: format!("batchnorm `{}` input features", state.name()),
                lhs: s,
                rhs: vec![state.channels()],
            });
        }
        self.batchnorm_impl(x, state, params, mode, BnLayout::Rows)
    }

    fn batchnorm_impl(
        &mut self,
        x: ValueId,
        state: &mut BatchNormState,
        params: &ParamSet,
        mode: Mode,
        layout: BnLayout,
    ) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        let channels = state.channels();
        let group = match layout {
            BnLayout::Spatial => shape[1] * shape[2],
            BnLayout::Rows => shape[0],
        };
        let gamma = self.param(state.gamma_id(), params);
        let beta = self.param(state.beta_id(), params);

        let (mean, var) = match mode {
            Mode::Training => {
                let xd = self.vals[x.0].data();
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut sum = 0.0;
                    for g in 0..group {
                        sum += xd[bn_index(layout, c, g, channels, group)];
                    }
                    let mu = sum / group as f64;
                    let mut sq = 0.0;
                    for g in 0..group {
                        let d = xd[bn_index(layout, c, g, channels, group)] - mu;
                        sq += d * d;
                    }
                    mean[c] = mu;
                    var[c] = sq / group as f64;
                }
                state.update_running(&mean, &var);
                (mean, var)
            }
            Mode::Evaluation => {
                if !state.initialized() {
                    return Err(Error::UninitializedRunningStats(state.name().to_string()));
                }
                (state.running_mean().to_vec(), state.running_var().to_vec())
            }
        };
        let inv_std: Vec<f64> =
            var.iter().map(|&v| 1.0 / (v + state.epsilon()).sqrt()).collect();

        let xd = self.vals[x.0].data();
        let gd = self.vals[gamma.0].data();
        let bd = self.vals[beta.0].data();
        let mut out = vec![0.0; xd.len()];
        for c in 0..channels {
            for g in 0..group {
                let i = bn_index(layout, c, g, channels, group);
                out[i] = gd[c] * (xd[i] - mean[c]) * inv_std[c] + bd[c];
            }
        }
        let out = self.push(Tensor::new(&shape, out)?, None);
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            layout,
            mean,
            inv_std,
            training: mode == Mode::Training,
        });
        Ok(out)
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// Label-smoothed cross-entropy, averaged over the batch. Accepts (K)
    /// logits with one label or (B, K) logits with B labels. The target
    /// distribution is `(1 - eps) * onehot + eps / K`.
    pub fn id_loss(&mut self, logits: ValueId, labels: &[usize], eps: f64) -> Result<ValueId> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Invalid(format!("label smoothing {eps} outside [0, 1)")));
        }
        let s = self.shape(logits).to_vec();
        let (b, k) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                return Err(Error::InvalidShape {
                    context: "id_loss logits".into(),
                    shape: s,
                    reason: "expected rank 1 or 2".into(),
                })
            }
        };
        if labels.len() != b {
            return Err(Error::Invalid(format!(
                "id_loss got {} labels for a batch of {b}",
                labels.len()
            )));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
        }
        let xd = self.vals[logits.0].data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &xd[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[i * k + j] = logp.exp();
                let q = eps / k as f64 + if j == labels[i] { 1.0 - eps } else { 0.0 };
                loss -= q * logp;
            }
        }
        loss /= b as f64;
        let out = self.push(Tensor::scalar(loss), None);
        self.ops.push(Op::IdLoss { logits, out, labels: labels.to_vec(), eps, probs });
        Ok(out)
    }

    /// Batch-hard triplet loss with Euclidean distances on (B, C)
    /// embeddings: per anchor, the farthest same-label and nearest
    /// different-label samples form the triplet, hinged at `margin` and
    /// averaged over anchors that have both. Anchors missing a positive or
    /// a negative are skipped; if every anchor is skipped the batch is
    /// unusable and that is an error.
    pub fn triplet_loss(&mut self, emb: ValueId, labels: &[usize], margin: f64) -> Result<ValueId> {
        self.want_rank(emb, 2, "triplet_loss embeddings")?;
        let (b, c) = (self.shape(emb)[0], self.shape(emb)[1]);
        if labels.len() != b {
            return Err(Error::Invalid(format!(
                "triplet_loss got {} labels for a batch of {b}",
                labels.len()
            )));
        }
        if margin < 0.0 {
            return Err(Error::Invalid(format!("triplet margin {margin} must be >= 0")));
        }
        let xd = self.vals[emb.0].data();
        let dist = |i: usize, j: usize| -> f64 {
            let (ri, rj) = (&xd[i * c..(i + 1) * c], &xd[j * c..(j + 1) * c]);
            ri.iter()
                .zip(rj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut choices = Vec::new();
        let mut loss = 0.0;
        for i in 0..b {
            let mut hardest_pos: Option<(usize, f64)> = None;
            let mut hardest_neg: Option<(usize, f64)> = None;
            for j in 0..b {
                if j == i {
                    continue;
                }
                let d = dist(i, j);
                if labels[j] == labels[i] {
                    if hardest_pos.map_or(true, |(_, dp)| d > dp) {
                        hardest_pos = Some((j, d));
                    }
                } else if hardest_neg.map_or(true, |(_, dn)| d < dn) {
                    hardest_neg = Some((j, d));
                }
            }
            if let (Some((pj, dp)), Some((nj, dn))) = (hardest_pos, hardest_neg) {
                let term = margin + dp - dn;
                let active = term > 0.0;
                if active {
                    loss += term;
                }
                choices.push(TripletChoice { anchor: i, pos: pj, neg: nj, dp, dn, active });
            }
        }
        if choices.is_empty() {
            return Err(Error::NoValidTriplets);
        }
        let valid = choices.len();
        loss /= valid as f64;
        let out = self.push(Tensor::scalar(loss), None);
        self.ops.push(Op::TripletLoss { emb, out, choices, valid });
        Ok(out)
    }

    /// Center loss: half the mean squared distance between each (B, C)
    /// embedding and its label's (K, C) center row.
    pub fn center_loss(
        &mut self,
        emb: ValueId,
        centers: ValueId,
        labels: &[usize],
    ) -> Result<ValueId> {
        self.want_rank(emb, 2, "center_loss embeddings")?;
        self.want_rank(centers, 2, "center_loss centers")?;
        let (b, c) = (self.shape(emb)[0], self.shape(emb)[1]);
        let (k, cc) = (self.shape(centers)[0], self.shape(centers)[1]);
        if cc != c {
            return Err(Error::ShapeMismatch {
                context: "center_loss embedding vs center width".into(),
                lhs: self.shape(emb).to_vec(),
                rhs: self.shape(centers).to_vec(),
            });
        }
        if labels.len() != b {
            return Err(Error::Invalid(format!(
                "center_loss got {} labels for a batch of {b}",
                labels.len()
            )));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::LabelOutOfRange { label: y, classes: k });
            }
        }
        let ed = self.vals[emb.0].data();
        let cd = self.vals[centers.0].data();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..c {
                let d = ed[i * c + j] - cd[y * c + j];
                loss += d * d;
            }
        }
        loss /= 2.0 * b as f64;
        let out = self.push(Tensor::scalar(loss), None);
        self.ops.push(Op::CenterLoss { emb, centers, out, labels: labels.to_vec() });
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each recorded op exactly
    /// once in reverse order, then deposits gradients of watched
    /// parameters into `params` — additively, so calling backward again
    /// without zeroing doubles them. Returns the per-value gradients for
    /// inspection.
    pub fn backward(&self, loss: ValueId, params: &mut ParamSet) -> Result<Gradients> {
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::InvalidShape {
                context: "backward loss".into(),
                shape: self.vals[loss.0].shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        if !self.vals[loss.0].data()[0].is_finite() {
            return Err(Error::NonFinite("backward loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![1.0]);
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        for (i, source) in self.sources.iter().enumerate() {
            if let (Some(pid), Some(g)) = (source, &grads[i]) {
                params.accumulate_grad(*pid, g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|v| Tensor::new(self.vals[i].shape(), v).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Matmul { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.vals[a.0].data(), self.vals[b.0].data());
                // dA = G · Bᵀ
                let ga = grad_slot(grads, *a, m * k);
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for l in 0..k {
                        let br = &bd[l * n..(l + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gr[j] * br[j];
                        }
                        ga[i * k + l] += s;
                    }
                }
                // dB = Aᵀ · G
                let gb = grad_slot(grads, *b, k * n);
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let ar = &ad[i * k..(i + 1) * k];
                    for (l, &av) in ar.iter().enumerate() {
                        if av != 0.0 {
                            let row = &mut gb[l * n..(l + 1) * n];
                            for j in 0..n {
                                row[j] += av * gr[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = grad_slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let gx = grad_slot(grads, *x, g.len());
                for (slot, gv) in gx.iter_mut().zip(&g) {
                    *slot += gv;
                }
            }
            Op::TransfToNodes { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let s = self.shape(*x);
                let (c, hw) = (s[0], s[1] * s[2]);
                let gx = grad_slot(grads, *x, c * hw);
                for ch in 0..c {
                    for n in 0..hw {
                        gx[ch * hw + n] += g[n * c + ch];
                    }
                }
            }
            Op::TransfToMap { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let gx = grad_slot(grads, *x, n * c);
                for node in 0..n {
                    for ch in 0..c {
                        gx[node * c + ch] += g[ch * n + node];
                    }
                }
            }
            Op::Relu { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let xd = self.vals[x.0].data();
                let gx = grad_slot(grads, *x, xd.len());
                for i in 0..xd.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::RowSoftmax { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let y = self.vals[out.0].data();
                let gx = grad_slot(grads, *x, r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::MaskedRowSoftmax { x, out, adj } => {
                let Some(g) = grads[out.0].clone() else { return };
                let n = adj.n();
                let y = self.vals[out.0].data();
                let gx = grad_slot(grads, *x, n * n);
                for i in 0..n {
                    let support = adj.neighbors(i);
                    if support.is_empty() {
                        continue;
                    }
                    let mut dot = 0.0;
                    for &j in support {
                        dot += y[i * n + j] * g[i * n + j];
                    }
                    for &j in support {
                        gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
            }
            Op::MaskMul { x, out, adj } => {
                let Some(g) = grads[out.0].clone() else { return };
                let n = adj.n();
                let gx = grad_slot(grads, *x, n * n);
                for i in 0..n {
                    for &j in adj.neighbors(i) {
                        gx[i * n + j] += g[i * n + j];
                    }
                }
            }
            Op::AddRowBroadcast { x, bias, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                {
                    let gx = grad_slot(grads, *x, r * c);
                    for (slot, gv) in gx.iter_mut().zip(&g) {
                        *slot += gv;
                    }
                }
                let gb = grad_slot(grads, *bias, c);
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, out, layout, mean, inv_std, training } => {
                let Some(g) = grads[out.0].clone() else { return };
                let channels = self.shape(*gamma)[0];
                let shape = self.shape(*x);
                let group = match layout {
                    BnLayout::Spatial => shape[1] * shape[2],
                    BnLayout::Rows => shape[0],
                };
                let xd = self.vals[x.0].data();
                let gd = self.vals[gamma.0].data();
                let gm = group as f64;
                // Scale/shift gradients are identical in both modes.
                {
                    let ggamma = grad_slot(grads, *gamma, channels);
                    for c in 0..channels {
                        let mut s = 0.0;
                        for gi in 0..group {
                            let i = bn_index(*layout, c, gi, channels, group);
                            let xhat = (xd[i] - mean[c]) * inv_std[c];
                            s += g[i] * xhat;
                        }
                        ggamma[c] += s;
                    }
                }
                {
                    let gbeta = grad_slot(grads, *beta, channels);
                    for c in 0..channels {
                        let mut s = 0.0;
                        for gi in 0..group {
                            s += g[bn_index(*layout, c, gi, channels, group)];
                        }
                        gbeta[c] += s;
                    }
                }
                let gx = grad_slot(grads, *x, xd.len());
                if *training {
                    // Batch statistics depend on x: the gradient removes
                    // the per-channel mean of g and the xhat-weighted mean.
                    for c in 0..channels {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for gi in 0..group {
                            let i = bn_index(*layout, c, gi, channels, group);
                            let xhat = (xd[i] - mean[c]) * inv_std[c];
                            mean_g += g[i];
                            mean_gx += g[i] * xhat;
                        }
                        mean_g /= gm;
                        mean_gx /= gm;
                        for gi in 0..group {
                            let i = bn_index(*layout, c, gi, channels, group);
                            let xhat = (xd[i] - mean[c]) * inv_std[c];
                            gx[i] += gd[c] * inv_std[c] * (g[i] - mean_g - xhat * mean_gx);
                        }
                    }
                } else {
                    // Running statistics are constants.
                    for c in 0..channels {
                        for gi in 0..group {
                            let i = bn_index(*layout, c, gi, channels, group);
                            gx[i] += gd[c] * inv_std[c] * g[i];
                        }
                    }
                }
            }
            Op::ScalarMix { a, x, y, out, alpha } => {
                let Some(g) = grads[out.0].clone() else { return };
                let xd = self.vals[x.0].data();
                let yd = self.vals[y.0].data();
                {
                    let gx = grad_slot(grads, *x, xd.len());
                    for (slot, gv) in gx.iter_mut().zip(&g) {
                        *slot += alpha * gv;
                    }
                }
                {
                    let gy = grad_slot(grads, *y, yd.len());
                    for (slot, gv) in gy.iter_mut().zip(&g) {
                        *slot += (1.0 - alpha) * gv;
                    }
                }
                let mut s = 0.0;
                for i in 0..xd.len() {
                    s += g[i] * (xd[i] - yd[i]);
                }
                let ga = grad_slot(grads, *a, 1);
                ga[0] += alpha * (1.0 - alpha) * s;
            }
            Op::GlobalAvgPool { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let s = self.shape(*x);
                let (c, m) = (s[0], s[1] * s[2]);
                let gx = grad_slot(grads, *x, c * m);
                for ch in 0..c {
                    let share = g[ch] / m as f64;
                    for i in 0..m {
                        gx[ch * m + i] += share;
                    }
                }
            }
            Op::Add { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                {
                    let ga = grad_slot(grads, *a, g.len());
                    for (slot, gv) in ga.iter_mut().zip(&g) {
                        *slot += gv;
                    }
                }
                let gb = grad_slot(grads, *b, g.len());
                for (slot, gv) in gb.iter_mut().zip(&g) {
                    *slot += gv;
                }
            }
            Op::Mul { a, b, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let (ad, bd) = (self.vals[a.0].data(), self.vals[b.0].data());
                {
                    let ga = grad_slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                let gb = grad_slot(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
            Op::Scale { x, factor, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let gx = grad_slot(grads, *x, g.len());
                for (slot, gv) in gx.iter_mut().zip(&g) {
                    *slot += factor * gv;
                }
            }
            Op::Sum { x, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let n = self.vals[x.0].numel();
                let gx = grad_slot(grads, *x, n);
                for slot in gx.iter_mut() {
                    *slot += g[0];
                }
            }
            Op::ConcatRows { xs, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let mut offset = 0;
                for &x in xs {
                    let len = self.vals[x.0].numel();
                    let gx = grad_slot(grads, x, len);
                    for (slot, gv) in gx.iter_mut().zip(&g[offset..offset + len]) {
                        *slot += gv;
                    }
                    offset += len;
                }
            }
            Op::ConcatMaps { xs, out } => {
                let Some(g) = grads[out.0].clone() else { return };
                let b = xs.len();
                let shape = self.vals[xs[0].0].shape();
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                for (bi, &x) in xs.iter().enumerate() {
                    let gx = grad_slot(grads, x, c * plane);
                    for ch in 0..c {
                        let src = ch * b * plane + bi * plane;
                        for k in 0..plane {
                            gx[ch * plane + k] += g[src + k];
                        }
                    }
                }
            }
            Op::MapBlock { x, out, index, h } => {
                let Some(g) = grads[out.0].clone() else { return };
                let shape = self.vals[x.0].shape();
                let (c, total, w) = (shape[0], shape[1], shape[2]);
                let blocks = total / h;
                let plane = h * w;
                let gx = grad_slot(grads, *x, c * total * w);
                for ch in 0..c {
                    let dst = ch * blocks * plane + index * plane;
                    for k in 0..plane {
                        gx[dst + k] += g[ch * plane + k];
                    }
                }
            }
            Op::RowBlock { x, out, index, rows } => {
                let Some(g) = grads[out.0].clone() else { return };
                let cols = self.vals[x.0].shape()[1];
                let n = self.vals[x.0].numel();
                let start = index * rows * cols;
                let gx = grad_slot(grads, *x, n);
                for (k, gv) in g.iter().enumerate() {
                    gx[start + k] += gv;
                }
            }
            Op::IdLoss { logits, out, labels, eps, probs } => {
                let Some(g) = grads[out.0].clone() else { return };
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let gl = grad_slot(grads, *logits, probs.len());
                for i in 0..b {
                    for j in 0..k {
                        let q = eps / k as f64 + if j == labels[i] { 1.0 - *eps } else { 0.0 };
                        gl[i * k + j] += scale * (probs[i * k + j] - q);
                    }
                }
            }
            Op::TripletLoss { emb, out, choices, valid } => {
                let Some(g) = grads[out.0].clone() else { return };
                let c = self.shape(*emb)[1];
                let xd = self.vals[emb.0].data();
                let coef = g[0] / *valid as f64;
                let ge = grad_slot(grads, *emb, xd.len());
                for ch in choices {
                    if !ch.active {
                        continue;
                    }
                    // d‖e_a − e_p‖ = (e_a − e_p)/dp toward the anchor;
                    // zero subgradient when two embeddings coincide.
                    if ch.dp > 0.0 {
                        for j in 0..c {
                            let u = (xd[ch.anchor * c + j] - xd[ch.pos * c + j]) / ch.dp;
                            ge[ch.anchor * c + j] += coef * u;
                            ge[ch.pos * c + j] -= coef * u;
                        }
                    }
                    if ch.dn > 0.0 {
                        for j in 0..c {
                            let v = (xd[ch.anchor * c + j] - xd[ch.neg * c + j]) / ch.dn;
                            ge[ch.anchor * c + j] -= coef * v;
                            ge[ch.neg * c + j] += coef * v;
                        }
                    }
                }
            }
            Op::CenterLoss { emb, centers, out, labels } => {
                let Some(g) = grads[out.0].clone() else { return };
                let c = self.shape(*emb)[1];
                let b = labels.len();
                let ed = self.vals[emb.0].data();
                let cd = self.vals[centers.0].data();
                let coef = g[0] / b as f64;
                {
                    let ge = grad_slot(grads, *emb, ed.len());
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            ge[i * c + j] += coef * (ed[i * c + j] - cd[y * c + j]);
                        }
                    }
                }
                let gc = grad_slot(grads, *centers, cd.len());
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        gc[y * c + j] -= coef * (ed[i * c + j] - cd[y * c + j]);
                    }
                }
            }
        }
    }
}

/// Flat index of group element `g` of channel `c` under a layout.
fn bn_index(layout: BnLayout, c: usize, g: usize, channels: usize, group: usize) -> usize {
    match layout {
        BnLayout::Spatial => c * group + g,
        BnLayout::Rows => g * channels + c,
    }
}

fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    id: ValueId,
    len: usize,
) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

/// out += A·B with a zero skip on A's entries — attention matrices are
/// mostly exact zeros, so propagation costs O(nnz · n) instead of O(n³).
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}
