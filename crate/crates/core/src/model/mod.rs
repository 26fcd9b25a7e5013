//! A small trainable re-identification network over graph attention:
//! 1×1 stem convolution → a stack of gated attention layers on a fixed
//! graph → global average pooling → a normalization neck shared by the
//! metric losses → a linear classifier head.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod optim;
pub mod train;

use crate::error::{Error, Result};
use crate::eval::EmbeddingSet;
use crate::graph::{
    generate_grid_graph_with_options, Adjacency, EdgeList, GridSpec, NeighborMode,
};
use crate::pga::{NodeLayout, PGAStack, PgaOptions};
use crate::tensor::{BatchNormState, Mode, ParamId, ParamSet, Tape, Tensor, ValueId};
use data::Sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

/// Which graph the attention layers run on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    /// Structured grid neighborhoods over pixels or channels.
    Grid(NeighborMode),
    /// Every pixel attends to every other pixel.
    FullyConnected,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphKind::Grid(mode) => write!(f, "{mode}"),
            GraphKind::FullyConnected => f.write_str("fully-connected"),
        }
    }
}

impl FromStr for GraphKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "fully-connected" {
            return Ok(GraphKind::FullyConnected);
        }
        NeighborMode::from_str(s).map(GraphKind::Grid).map_err(|_| {
            Error::Config(format!(
                "unknown graph kind `{s}` (expected four, eight, two-channel, or fully-connected)"
            ))
        })
    }
}

/// Hyperparameters fixing the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels of the raw input maps.
    pub input_channels: usize,
    /// Channels after the stem; width of the embedding.
    pub channels: usize,
    /// Projection width of the attention score embeddings (pixel-node
    /// layouts; channel-node layouts project their spatial features to
    /// half width instead).
    pub cprime: usize,
    pub h: usize,
    pub w: usize,
    /// Number of identities the classifier head separates.
    pub classes: usize,
    /// Number of stacked attention layers (0 disables attention).
    pub depth: usize,
    pub graph: GraphKind,
    pub literal_softmax: bool,
    pub value_projection: bool,
    pub self_loops: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("channels", self.channels),
            ("cprime", self.cprime),
            ("h", self.h),
            ("w", self.w),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} exceeds the supported 8", self.depth)));
        }
        Ok(())
    }

    /// Node layout implied by the graph choice.
    pub fn layout(&self) -> NodeLayout {
        match self.graph {
            GraphKind::Grid(NeighborMode::TwoChannel) => {
                NodeLayout::Channel { h: self.h, w: self.w }
            }
            _ => NodeLayout::Pixel { h: self.h, w: self.w },
        }
    }

    fn build_adjacency(&self) -> Result<Adjacency> {
        match self.graph {
            GraphKind::Grid(mode) => {
                let spec = GridSpec::new(self.h, self.w, self.channels)?;
                generate_grid_graph_with_options(spec, mode, self.self_loops)
            }
            GraphKind::FullyConnected => {
                let n = self.h * self.w;
                if !self.self_loops {
                    return Ok(Adjacency::complete(n));
                }
                let mut e = EdgeList::new();
                for i in 0..n {
                    for j in 0..i {
                        e.push(i, j);
                    }
                    e.push(i, i);
                }
                Adjacency::from_pairs(&e, n)
            }
        }
    }
}

/// One recorded batch forward pass.
#[derive(Debug)]
pub struct BatchForward {
    /// (B, classes) classifier scores.
    pub logits: ValueId,
    /// (B, channels) post-neck embeddings — the vectors retrieval uses.
    pub embeddings: ValueId,
    /// Attention matrices of the first sample in the batch, one per layer.
    pub attentions: Vec<ValueId>,
}

/// One recorded single-sample forward pass (shapes squeezed).
#[derive(Debug)]
pub struct SingleForward {
    /// (classes) scores.
    pub logits: ValueId,
    /// (channels) post-neck embedding.
    pub embedding: ValueId,
    pub attentions: Vec<ValueId>,
}

/// The full trainable network with its parameter arena.
#[derive(Clone)]
pub struct ToyModel {
    params: ParamSet,
    stem_weight: ParamId,
    stem_bias: ParamId,
    stem_bn: BatchNormState,
    stack: PGAStack,
    neck: BatchNormState,
    cls_weight: ParamId,
    cls_bias: ParamId,
    centers: ParamId,
    cfg: ModelConfig,
    adjacency: Arc<Adjacency>,
}

impl ToyModel {
    /// Builds and He-initializes the network deterministically from a seed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let stem_std = (2.0 / cfg.input_channels as f64).sqrt();
        let mut w = Tensor::randn(&[cfg.channels, cfg.input_channels], &mut rng);
        for v in w.data_mut() {
            *v *= stem_std;
        }
        let stem_weight = params.register("stem.weight", w)?;
        let stem_bias = params.register("stem.bias", Tensor::zeros(&[cfg.channels]))?;
        let stem_bn = BatchNormState::new(&mut params, "stem.bn", cfg.channels)?;

        let adjacency = Arc::new(cfg.build_adjacency()?);
        let layout = cfg.layout();
        let feature_in = layout.feature_dim(cfg.channels);
        let feature_proj = match layout {
            NodeLayout::Pixel { .. } => cfg.cprime,
            NodeLayout::Channel { h, w } => (h * w / 2).max(1),
        };
        let options = PgaOptions {
            literal_softmax: cfg.literal_softmax,
            value_projection: cfg.value_projection,
        };
        let stack = PGAStack::build(
            &mut params,
            "pga",
            cfg.depth,
            Arc::clone(&adjacency),
            layout,
            feature_in,
            feature_proj,
            options,
            &mut rng,
        )?;

        let neck = BatchNormState::new(&mut params, "neck", cfg.channels)?;

        let cls_std = (1.0 / cfg.channels as f64).sqrt();
        let mut cw = Tensor::randn(&[cfg.classes, cfg.channels], &mut rng);
        for v in cw.data_mut() {
            *v *= cls_std;
        }
        let cls_weight = params.register("classifier.weight", cw)?;
        let cls_bias = params.register("classifier.bias", Tensor::zeros(&[cfg.classes]))?;
        let centers =
            params.register("centers", Tensor::zeros(&[cfg.classes, cfg.channels]))?;

        Ok(Self {
            params,
            stem_weight,
            stem_bias,
            stem_bn,
            stack,
            neck,
            cls_weight,
            cls_bias,
            centers,
            cfg,
            adjacency,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn adjacency(&self) -> &Arc<Adjacency> {
        &self.adjacency
    }

    pub fn stack(&self) -> &PGAStack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut PGAStack {
        &mut self.stack
    }

    /// Id of the (classes, channels) class-center parameter.
    pub fn centers_id(&self) -> ParamId {
        self.centers
    }

    /// Residual-gate values of every attention layer, in order.
    pub fn alphas(&self) -> Vec<f64> {
        self.stack.alphas(&self.params)
    }

    /// Every normalization state in the model, in a fixed order.
    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        let mut states = vec![&mut self.stem_bn];
        for layer in self.stack.layers_mut() {
            states.extend(layer.bn_states_mut());
        }
        states.push(&mut self.neck);
        states
    }

    /// Records a forward pass of a batch of (input_channels, h, w) maps.
    ///
    /// Every normalization layer — stem, attention projections, and neck —
    /// pools its training statistics across the whole batch, the same
    /// per-feature transform that evaluation mode later applies with the
    /// accumulated running averages. Evaluation mode requires previously
    /// accumulated (or seeded) running statistics.
    pub fn forward_batch(
        &mut self,
        tape: &mut Tape,
        inputs: &[&Tensor],
        mode: Mode,
    ) -> Result<BatchForward> {
        if inputs.is_empty() {
            return Err(Error::Invalid("forward_batch needs at least one input".into()));
        }
        let Self { params, stem_weight, stem_bias, stem_bn, stack, neck, cls_weight, cls_bias, cfg, .. } =
            self;
        let want = [cfg.input_channels, cfg.h, cfg.w];
        let w = tape.param(*stem_weight, params);
        let b = tape.param(*stem_bias, params);
        let mut stems = Vec::with_capacity(inputs.len());
        for (bi, &x) in inputs.iter().enumerate() {
            if x.shape() != want {
                return Err(Error::InvalidShape {
                    context: format!("forward_batch input {bi}"),
                    shape: x.shape().to_vec(),
                    reason: format!("model expects ({}, {}, {})", want[0], want[1], want[2]),
                });
            }
            let xid = tape.leaf(x.clone());
            stems.push(tape.conv1x1(xid, w, b)?);
        }
        let stacked = tape.concat_maps(&stems)?;
        let normed = tape.batchnorm_spatial(stacked, stem_bn, params, mode)?;
        let active = tape.relu(normed)?;
        let mut maps = Vec::with_capacity(inputs.len());
        for bi in 0..inputs.len() {
            maps.push(tape.map_block(active, bi, cfg.h)?);
        }
        let (outs, attentions) = stack.forward_batch_with_attention(tape, params, &maps, mode)?;
        let mut rows = Vec::with_capacity(outs.len());
        for f in outs {
            let pooled = tape.global_avg_pool(f)?;
            rows.push(tape.reshape(pooled, &[1, cfg.channels])?);
        }
        let pre_neck = tape.concat_rows(&rows)?;
        let embeddings = tape.batchnorm_rows(pre_neck, neck, params, mode)?;
        let wc = tape.param(*cls_weight, params);
        let bc = tape.param(*cls_bias, params);
        let wct = tape.transpose(wc)?;
        let scores = tape.matmul(embeddings, wct)?;
        let logits = tape.add_row_broadcast(scores, bc)?;
        Ok(BatchForward { logits, embeddings, attentions })
    }

    /// Single-sample forward with squeezed output shapes. Meant for
    /// evaluation passes: in training mode the neck would normalize a
    /// batch of one, collapsing the embedding.
    pub fn forward_single(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        mode: Mode,
    ) -> Result<SingleForward> {
        let classes = self.cfg.classes;
        let channels = self.cfg.channels;
        let batch = self.forward_batch(tape, &[x], mode)?;
        Ok(SingleForward {
            logits: tape.reshape(batch.logits, &[classes])?,
            embedding: tape.reshape(batch.embeddings, &[channels])?,
            attentions: batch.attentions,
        })
    }
}

/// Runs every sample through the model in evaluation mode and collects
/// the post-neck embeddings with identity and camera annotations.
pub fn extract_embeddings(model: &mut ToyModel, samples: &[&Sample]) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::new(model.cfg().channels);
    for s in samples {
        let mut tape = Tape::new();
        let fwd = model.forward_single(&mut tape, &s.features, Mode::Evaluation)?;
        set.push(tape.value(fwd.embedding).data(), s.id, s.camera)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            input_channels: 2,
            channels: 4,
            cprime: 2,
            h: 3,
            w: 2,
            classes: 3,
            depth: 2,
            graph: GraphKind::Grid(NeighborMode::Four),
            literal_softmax: false,
            value_projection: false,
            self_loops: false,
        }
    }

    #[test]
    fn construction_is_deterministic_per_seed() {
        let a = ToyModel::new(tiny_cfg(), 5).unwrap();
        let b = ToyModel::new(tiny_cfg(), 5).unwrap();
        let c = ToyModel::new(tiny_cfg(), 6).unwrap();
        for (id_a, id_b) in a.params().ids().zip(b.params().ids()) {
            assert_eq!(a.params().value(id_a).data(), b.params().value(id_b).data());
        }
        let differs = a
            .params()
            .ids()
            .zip(c.params().ids())
            .any(|(x, y)| a.params().value(x).data() != c.params().value(y).data());
        assert!(differs, "different seeds should give different weights");
    }

    #[test]
    fn parameter_names_follow_the_layer_structure() {
        let m = ToyModel::new(tiny_cfg(), 1).unwrap();
        for name in [
            "stem.weight",
            "stem.bias",
            "stem.bn.gamma",
            "pga.0.theta.weight",
            "pga.0.phi.bn.beta",
            "pga.1.alpha",
            "neck.gamma",
            "classifier.weight",
            "classifier.bias",
            "centers",
        ] {
            assert!(m.params().find(name).is_some(), "missing parameter {name}");
        }
        // Depth 2 means no third layer.
        assert!(m.params().find("pga.2.alpha").is_none());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut m = ToyModel::new(tiny_cfg(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::randn(&[2, 3, 2], &mut rng);
        let x1 = Tensor::randn(&[2, 3, 2], &mut rng);
        let mut tape = Tape::new();
        let out = m
            .forward_batch(&mut tape, &[&x0, &x1], Mode::Training)
            .unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[2, 3]);
        assert_eq!(tape.value(out.embeddings).shape(), &[2, 4]);
        assert_eq!(out.attentions.len(), 2);

        // Rebuilding the model and rerunning reproduces the numbers.
        let mut m2 = ToyModel::new(tiny_cfg(), 2).unwrap();
        let mut tape2 = Tape::new();
        let out2 = m2
            .forward_batch(&mut tape2, &[&x0, &x1], Mode::Training)
            .unwrap();
        assert_eq!(tape.value(out.logits).data(), tape2.value(out2.logits).data());
    }

    #[test]
    fn depth_zero_skips_attention_entirely() {
        let mut cfg = tiny_cfg();
        cfg.depth = 0;
        let mut m = ToyModel::new(cfg, 3).unwrap();
        assert_eq!(m.stack().depth(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 3, 2], &mut rng);
        let y = Tensor::randn(&[2, 3, 2], &mut rng);
        let mut tape = Tape::new();
        let out = m.forward_batch(&mut tape, &[&x, &y], Mode::Training).unwrap();
        assert!(out.attentions.is_empty());
        assert_eq!(tape.value(out.logits).shape(), &[2, 3]);
    }

    #[test]
    fn eval_before_any_training_is_an_uninitialized_error() {
        let mut m = ToyModel::new(tiny_cfg(), 3).unwrap();
        let x = Tensor::zeros(&[2, 3, 2]);
        let mut tape = Tape::new();
        match m.forward_batch(&mut tape, &[&x], Mode::Evaluation) {
            Err(Error::UninitializedRunningStats(_)) => {}
            other => panic!("expected uninitialized stats, got {other:?}"),
        }
        // Seeding every state makes evaluation work.
        for bn in m.bn_states_mut() {
            let ch = bn.channels();
            bn.seed_running(&vec![0.0; ch], &vec![1.0; ch]).unwrap();
        }
        let mut tape2 = Tape::new();
        let out = m.forward_single(&mut tape2, &x, Mode::Evaluation).unwrap();
        assert_eq!(tape2.value(out.logits).shape(), &[3]);
        assert_eq!(tape2.value(out.embedding).shape(), &[4]);
    }

    #[test]
    fn channel_graph_builds_and_runs() {
        let mut cfg = tiny_cfg();
        cfg.graph = GraphKind::Grid(NeighborMode::TwoChannel);
        let mut m = ToyModel::new(cfg, 9).unwrap();
        // Channel chain: 4 channels → 3 undirected edges → 6 directed.
        assert_eq!(m.adjacency().n(), 4);
        assert_eq!(m.adjacency().num_directed_edges(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 2], &mut rng);
        let y = Tensor::randn(&[2, 3, 2], &mut rng);
        let mut tape = Tape::new();
        let out = m.forward_batch(&mut tape, &[&x, &y], Mode::Training).unwrap();
        assert_eq!(tape.value(out.embeddings).shape(), &[2, 4]);
        // Channel-node attention is (C, C).
        assert_eq!(tape.value(out.attentions[0]).shape(), &[4, 4]);
    }

    #[test]
    fn fully_connected_graph_attends_everywhere() {
        let mut cfg = tiny_cfg();
        cfg.graph = GraphKind::FullyConnected;
        let m = ToyModel::new(cfg, 9).unwrap();
        let n = 6;
        assert_eq!(m.adjacency().n(), n);
        assert_eq!(m.adjacency().num_directed_edges(), n * (n - 1));
    }

    #[test]
    fn graph_kind_round_trips_through_strings() {
        for kind in [
            GraphKind::Grid(NeighborMode::Four),
            GraphKind::Grid(NeighborMode::Eight),
            GraphKind::Grid(NeighborMode::TwoChannel),
            GraphKind::FullyConnected,
        ] {
            let s = kind.to_string();
            assert_eq!(GraphKind::from_str(&s).unwrap(), kind);
        }
        assert!(GraphKind::from_str("blob").is_err());
    }

    #[test]
    fn config_validation_rejects_degenerate_settings() {
        let mut cfg = tiny_cfg();
        cfg.classes = 1;
        assert!(ToyModel::new(cfg, 0).is_err());
        let mut cfg = tiny_cfg();
        cfg.channels = 0;
        assert!(ToyModel::new(cfg, 0).is_err());
        let mut cfg = tiny_cfg();
        cfg.depth = 9;
        assert!(ToyModel::new(cfg, 0).is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut m = ToyModel::new(tiny_cfg(), 0).unwrap();
        let mut tape = Tape::new();
        let bad = Tensor::zeros(&[2, 2, 3]);
        assert!(m.forward_batch(&mut tape, &[&bad], Mode::Training).is_err());
    }
}
