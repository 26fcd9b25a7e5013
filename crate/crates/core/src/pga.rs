//! Pixel-wise graph attention: project node features, correlate every
//! node against its graph neighborhood, softmax the scores over the
//! adjacency support, and propagate neighbor values back through the
//! graph, with a learnable gate blending the result into the input.
//!
//! Layers are layout-generic: nodes are either the pixels of a (C, H, W)
//! map (features = channel vectors) or its channels (features = flattened
//! spatial planes), so the same attention machinery serves both spatial
//! and channel graphs.

use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::tensor::{sigmoid, Mode, ParamId, ParamSet, Tape, Tensor, ValueId};
use crate::tensor::BatchNormState;
use rand::Rng;
use std::sync::Arc;

/// What a graph node stands for inside a (C, H, W) feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeLayout {
    /// One node per pixel (N = H·W), feature = that pixel's channel
    /// vector. Node id is the row-major pixel index.
    Pixel { h: usize, w: usize },
    /// One node per channel (N = C), feature = that channel's flattened
    /// H·W plane.
    Channel { h: usize, w: usize },
}

impl NodeLayout {
    pub fn spatial(self) -> (usize, usize) {
        match self {
            NodeLayout::Pixel { h, w } | NodeLayout::Channel { h, w } => (h, w),
        }
    }

    /// Feature width of one node given the map's channel count.
    pub fn feature_dim(self, channels: usize) -> usize {
        match self {
            NodeLayout::Pixel { .. } => channels,
            NodeLayout::Channel { h, w } => h * w,
        }
    }

    fn check_map(&self, shape: &[usize], adj: &Adjacency) -> Result<()> {
        let (h, w) = self.spatial();
        let ok = shape.len() == 3 && shape[1] == h && shape[2] == w;
        if !ok {
            return Err(Error::InvalidShape {
                context: "pga input map".into(),
                shape: shape.to_vec(),
                reason: format!("layout expects (C, {h}, {w})"),
            });
        }
        let nodes = match self {
            NodeLayout::Pixel { .. } => h * w,
            NodeLayout::Channel { .. } => shape[0],
        };
        if nodes != adj.n() {
            return Err(Error::ShapeMismatch {
                context: "pga graph size vs node count".into(),
                lhs: vec![nodes],
                rhs: vec![adj.n()],
            });
        }
        Ok(())
    }
}

/// Learnable projection from map features to per-node embeddings:
/// linear map over the node feature, batch norm across nodes, ReLU,
/// delivered as an (N, P) node matrix.
#[derive(Clone)]
pub struct TransferFunction {
    weight: ParamId,
    bias: ParamId,
    bn: BatchNormState,
}

impl TransferFunction {
    /// Registers `<name>.weight` (out × in, He-initialized),
    /// `<name>.bias` (out, zero) and a `<name>.bn` normalization state.
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        feature_in: usize,
        feature_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if feature_in == 0 || feature_out == 0 {
            return Err(Error::Invalid(format!(
                "transfer `{name}` needs positive dimensions, got {feature_in} -> {feature_out}"
            )));
        }
        let std = (2.0 / feature_in as f64).sqrt();
        let mut w = Tensor::randn(&[feature_out, feature_in], rng);
        for v in w.data_mut() {
            *v *= std;
        }
        let weight = params.register(&format!("{name}.weight"), w)?;
        let bias = params.register(&format!("{name}.bias"), Tensor::zeros(&[feature_out]))?;
        let bn = BatchNormState::new(params, &format!("{name}.bn"), feature_out)?;
        Ok(Self { weight, bias, bn })
    }

    pub fn bn(&self) -> &BatchNormState {
        &self.bn
    }

    pub fn bn_mut(&mut self) -> &mut BatchNormState {
        &mut self.bn
    }

    /// (C, H, W) map → (N, P) node embeddings under the given layout.
    pub fn apply(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        f: ValueId,
        layout: NodeLayout,
        mode: Mode,
    ) -> Result<ValueId> {
        let mut outs = self.apply_batch(tape, params, &[f], layout, mode)?;
        Ok(outs.pop().expect("one output per input"))
    }

    /// Batched projection: every sample is projected independently, but
    /// the normalization pools its training statistics over the whole
    /// batch before the samples are split apart again, so training and
    /// running-average evaluation apply the same transform.
    pub fn apply_batch(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        fs: &[ValueId],
        layout: NodeLayout,
        mode: Mode,
    ) -> Result<Vec<ValueId>> {
        if fs.is_empty() {
            return Err(Error::Invalid("transfer needs at least one input".into()));
        }
        let w = tape.param(self.weight, params);
        let b = tape.param(self.bias, params);
        match layout {
            NodeLayout::Pixel { h, .. } => {
                let mut projected = Vec::with_capacity(fs.len());
                for &f in fs {
                    projected.push(tape.conv1x1(f, w, b)?);
                }
                let stacked = tape.concat_maps(&projected)?;
                let normed = tape.batchnorm_spatial(stacked, &mut self.bn, params, mode)?;
                let active = tape.relu(normed)?;
                let mut outs = Vec::with_capacity(fs.len());
                for bi in 0..fs.len() {
                    let map = tape.map_block(active, bi, h)?;
                    outs.push(tape.transf_to_nodes(map)?);
                }
                Ok(outs)
            }
            NodeLayout::Channel { h, w: ww } => {
                let wt = tape.transpose(w)?;
                let rows = tape.value(fs[0]).shape()[0];
                let mut projected = Vec::with_capacity(fs.len());
                for &f in fs {
                    let c = tape.value(f).shape()[0];
                    let x = tape.reshape(f, &[c, h * ww])?;
                    let y = tape.matmul(x, wt)?;
                    projected.push(tape.add_row_broadcast(y, b)?);
                }
                let stacked = tape.concat_rows(&projected)?;
                let normed = tape.batchnorm_rows(stacked, &mut self.bn, params, mode)?;
                let active = tape.relu(normed)?;
                let mut outs = Vec::with_capacity(fs.len());
                for bi in 0..fs.len() {
                    outs.push(tape.row_block(active, bi, rows)?);
                }
                Ok(outs)
            }
        }
    }
}

/// Behavior switches of a PGA layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PgaOptions {
    /// Softmax the masked scores over the whole row (zeros included)
    /// instead of restricting it to the adjacency support.
    pub literal_softmax: bool,
    /// Pass node values through a learnable square projection before
    /// propagation instead of using the raw features.
    pub value_projection: bool,
}

/// Row-wise attention over an adjacency: supported entries of the score
/// matrix compete in a softmax, everything else is exactly zero. With
/// `literal`, the scores are merely zeroed off-support and the softmax
/// runs over the full row.
pub fn masked_attention(
    tape: &mut Tape,
    adj: &Arc<Adjacency>,
    scores: ValueId,
    literal: bool,
) -> Result<ValueId> {
    if literal {
        let zeroed = tape.mask_mul(scores, adj)?;
        tape.row_softmax(zeroed)
    } else {
        tape.masked_row_softmax(scores, adj)
    }
}

/// Weighted neighborhood aggregation: ReLU(attention · values).
pub fn propagate(tape: &mut Tape, attention: ValueId, values: ValueId) -> Result<ValueId> {
    let mixed = tape.matmul(attention, values)?;
    tape.relu(mixed)
}

/// One graph-attention layer over a fixed adjacency: θ and φ project the
/// map to node embeddings, their correlation is softmaxed over the graph
/// support, neighbor values are aggregated, and the result is folded back
/// into map form. `residual_forward` additionally blends the input with
/// the aggregated output through a learnable sigmoid gate initialized to
/// an even 0.5/0.5 split.
#[derive(Clone)]
pub struct PGALayer {
    theta: TransferFunction,
    phi: TransferFunction,
    alpha_raw: ParamId,
    value_weight: Option<ParamId>,
    adjacency: Arc<Adjacency>,
    layout: NodeLayout,
    options: PgaOptions,
}

impl PGALayer {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        adjacency: Arc<Adjacency>,
        layout: NodeLayout,
        feature_in: usize,
        feature_proj: usize,
        options: PgaOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if let NodeLayout::Pixel { h, w } = layout {
            if adjacency.n() != h * w {
                return Err(Error::ShapeMismatch {
                    context: format!("pga layer `{name}` graph vs pixel grid"),
                    lhs: vec![adjacency.n()],
                    rhs: vec![h * w],
                });
            }
        }
        let theta =
            TransferFunction::new(params, &format!("{name}.theta"), feature_in, feature_proj, rng)?;
        let phi =
            TransferFunction::new(params, &format!("{name}.phi"), feature_in, feature_proj, rng)?;
        let alpha_raw = params.register(&format!("{name}.alpha"), Tensor::scalar(0.0))?;
        let value_weight = if options.value_projection {
            let std = (2.0 / feature_in as f64).sqrt();
            let mut w = Tensor::randn(&[feature_in, feature_in], rng);
            for v in w.data_mut() {
                *v *= std;
            }
            Some(params.register(&format!("{name}.value.weight"), w)?)
        } else {
            None
        };
        Ok(Self { theta, phi, alpha_raw, value_weight, adjacency, layout, options })
    }

    pub fn adjacency(&self) -> &Arc<Adjacency> {
        &self.adjacency
    }

    pub fn layout(&self) -> NodeLayout {
        self.layout
    }

    pub fn options(&self) -> PgaOptions {
        self.options
    }

    /// Current value of the residual gate (the input's share).
    pub fn alpha(&self, params: &ParamSet) -> f64 {
        sigmoid(params.value(self.alpha_raw).data()[0])
    }

    /// Batch-norm states of this layer, for seeding or inspection.
    pub fn bn_states_mut(&mut self) -> [&mut BatchNormState; 2] {
        [self.theta.bn_mut(), self.phi.bn_mut()]
    }

    /// Raw node features of the map under this layer's layout: (N, C) for
    /// pixel nodes, (C, H·W) for channel nodes.
    fn node_values(&self, tape: &mut Tape, f: ValueId) -> Result<ValueId> {
        match self.layout {
            NodeLayout::Pixel { .. } => tape.transf_to_nodes(f),
            NodeLayout::Channel { h, w } => {
                let c = tape.value(f).shape()[0];
                tape.reshape(f, &[c, h * w])
            }
        }
    }

    /// Node matrix back to a (C, H, W) map.
    fn nodes_to_map(&self, tape: &mut Tape, nodes: ValueId) -> Result<ValueId> {
        let (h, w) = self.layout.spatial();
        match self.layout {
            NodeLayout::Pixel { .. } => tape.transf_to_map(nodes, h, w),
            NodeLayout::Channel { .. } => {
                let c = tape.value(nodes).shape()[0];
                tape.reshape(nodes, &[c, h, w])
            }
        }
    }

    /// The attention transform alone: map in, aggregated map out, plus
    /// the (N, N) attention matrix actually used.
    pub fn pga_forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        f: ValueId,
        mode: Mode,
    ) -> Result<(ValueId, ValueId)> {
        let mut outs = self.pga_forward_batch(tape, params, &[f], mode)?;
        Ok(outs.pop().expect("one output per input"))
    }

    /// Batched attention transform: the θ/φ projections normalize over
    /// the whole batch, then attention and aggregation run per sample.
    /// Returns each sample's output map and attention matrix.
    pub fn pga_forward_batch(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        fs: &[ValueId],
        mode: Mode,
    ) -> Result<Vec<(ValueId, ValueId)>> {
        for &f in fs {
            self.layout.check_map(tape.value(f).shape(), &self.adjacency)?;
        }
        let theta_nodes = self.theta.apply_batch(tape, params, fs, self.layout, mode)?;
        let phi_nodes = self.phi.apply_batch(tape, params, fs, self.layout, mode)?;
        let mut outs = Vec::with_capacity(fs.len());
        for (bi, &f) in fs.iter().enumerate() {
            let phi_t = tape.transpose(phi_nodes[bi])?;
            let scores = tape.matmul(theta_nodes[bi], phi_t)?;
            let attention =
                masked_attention(tape, &self.adjacency, scores, self.options.literal_softmax)?;
            let mut values = self.node_values(tape, f)?;
            if let Some(vw) = self.value_weight {
                let w = tape.param(vw, params);
                let wt = tape.transpose(w)?;
                values = tape.matmul(values, wt)?;
            }
            let mixed = propagate(tape, attention, values)?;
            let out = self.nodes_to_map(tape, mixed)?;
            outs.push((out, attention));
        }
        Ok(outs)
    }

    /// Full layer: gate · input + (1 − gate) · attention output.
    pub fn residual_forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        f: ValueId,
        mode: Mode,
    ) -> Result<(ValueId, ValueId)> {
        let mut outs = self.residual_forward_batch(tape, params, &[f], mode)?;
        Ok(outs.pop().expect("one output per input"))
    }

    /// Batched full layer: one shared gate blends each sample's input
    /// with its attention output.
    pub fn residual_forward_batch(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        fs: &[ValueId],
        mode: Mode,
    ) -> Result<Vec<(ValueId, ValueId)>> {
        let pga = self.pga_forward_batch(tape, params, fs, mode)?;
        let gate = tape.param(self.alpha_raw, params);
        let mut outs = Vec::with_capacity(fs.len());
        for (&f, (pga_out, attention)) in fs.iter().zip(pga) {
            let out = tape.scalar_mix(gate, f, pga_out)?;
            outs.push((out, attention));
        }
        Ok(outs)
    }
}

/// A sequence of PGA layers applied back to back, each with its own
/// projections and gate.
#[derive(Clone)]
pub struct PGAStack {
    layers: Vec<PGALayer>,
}

impl PGAStack {
    /// Builds `depth` layers named `<prefix>.0`, `<prefix>.1`, … sharing
    /// a graph and layout but owning independent parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        depth: usize,
        adjacency: Arc<Adjacency>,
        layout: NodeLayout,
        feature_in: usize,
        feature_proj: usize,
        options: PgaOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            layers.push(PGALayer::new(
                params,
                &format!("{prefix}.{i}"),
                Arc::clone(&adjacency),
                layout,
                feature_in,
                feature_proj,
                options,
                rng,
            )?);
        }
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[PGALayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [PGALayer] {
        &mut self.layers
    }

    /// Residual gates of all layers, in order.
    pub fn alphas(&self, params: &ParamSet) -> Vec<f64> {
        self.layers.iter().map(|l| l.alpha(params)).collect()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        f: ValueId,
        mode: Mode,
    ) -> Result<ValueId> {
        Ok(self.forward_with_attention(tape, params, f, mode)?.0)
    }

    /// Forward pass that also returns each layer's attention matrix.
    pub fn forward_with_attention(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        f: ValueId,
        mode: Mode,
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let (mut outs, attentions) = self.forward_batch_with_attention(tape, params, &[f], mode)?;
        Ok((outs.pop().expect("one output per input"), attentions))
    }

    /// Batched forward: the layers normalize over the whole batch jointly.
    /// Returns every sample's output map plus the per-layer attention
    /// matrices of the first sample.
    pub fn forward_batch_with_attention(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        fs: &[ValueId],
        mode: Mode,
    ) -> Result<(Vec<ValueId>, Vec<ValueId>)> {
        let mut cur = fs.to_vec();
        let mut attentions = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let stepped = layer.residual_forward_batch(tape, params, &cur, mode)?;
            cur.clear();
            for (bi, (out, att)) in stepped.into_iter().enumerate() {
                if bi == 0 {
                    attentions.push(att);
                }
                cur.push(out);
            }
        }
        Ok((cur, attentions))
    }

    /// Chains the attention transforms without the residual blend, so the
    /// output at a node depends exactly on its depth-sized graph
    /// neighborhood of the input.
    pub fn non_residual_forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamSet,
        f: ValueId,
        mode: Mode,
    ) -> Result<ValueId> {
        let mut cur = f;
        for layer in &mut self.layers {
            let (next, _) = layer.pga_forward(tape, params, cur, mode)?;
            cur = next;
        }
        Ok(cur)
    }
}
