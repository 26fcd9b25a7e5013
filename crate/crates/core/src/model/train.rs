//! PK-batch training loop: each batch holds `batch_p` identities with
//! `batch_k` samples each, so the triplet loss always finds positives and
//! negatives. One tape per batch, one backward, one optimizer step.

use super::data::{Dataset, Split};
use super::loss::{total_loss, LossConfig};
use super::optim::{AdamConfig, AdamState};
use super::ToyModel;
use crate::error::{Error, Result};
use crate::tensor::{Mode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Training-run settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Identities per batch.
    pub batch_p: usize,
    /// Samples per identity per batch.
    pub batch_k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub loss: LossConfig,
    /// Seed of the batch-sampling stream (independent of model and data
    /// seeds).
    pub seed: u64,
    /// Stop once training accuracy reaches this value, if set.
    pub early_stop_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_p: 4,
            batch_k: 4,
            lr: 1e-2,
            weight_decay: 5e-4,
            warmup_iters: 500,
            loss: LossConfig::default(),
            seed: 42,
            early_stop_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_p < 2 {
            return Err(Error::Config(
                "batch_p must be at least 2 so every batch has negatives".into(),
            ));
        }
        if self.batch_k < 2 {
            return Err(Error::Config(
                "batch_k must be at least 2 so every batch has positives".into(),
            ));
        }
        self.loss.validate()?;
        AdamConfig::new(self.lr, self.weight_decay, self.warmup_iters).validate()
    }
}

/// Per-epoch record of the run.
#[derive(Clone, Debug)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Batch-averaged losses over the epoch.
    pub loss: f64,
    pub id_loss: f64,
    pub triplet_loss: f64,
    pub center_loss: f64,
    /// Classification accuracy over the training split, evaluation mode.
    pub train_acc: f64,
    /// Residual gate of each attention layer after the epoch.
    pub alphas: Vec<f64>,
}

/// Trains the model on the dataset's training split and returns one log
/// entry per completed epoch.
pub fn train(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.cfg().classes != model.cfg().classes {
        return Err(Error::Config(format!(
            "dataset has {} identities but the model classifies {}",
            data.cfg().classes,
            model.cfg().classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig::new(cfg.lr, cfg.weight_decay, cfg.warmup_iters),
    )?;

    // Training-sample indices grouped per identity.
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); data.cfg().classes];
    for idx in data.split_indices(Split::Train) {
        pools[data.samples()[idx].id].push(idx);
    }
    if pools.iter().any(|p| p.is_empty()) {
        return Err(Error::Config("every identity needs at least one training sample".into()));
    }

    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut ids: Vec<usize> = (0..data.cfg().classes).collect();
        ids.shuffle(&mut rng);
        let mut sums = [0.0f64; 4]; // total, id, triplet, center
        let mut batches = 0usize;
        for chunk in ids.chunks(cfg.batch_p) {
            if chunk.len() < 2 {
                continue; // a lone identity has no negatives
            }
            let mut batch_indices = Vec::with_capacity(chunk.len() * cfg.batch_k);
            let mut labels = Vec::with_capacity(chunk.len() * cfg.batch_k);
            for &id in chunk {
                let mut pool = pools[id].clone();
                pool.shuffle(&mut rng);
                for s in 0..cfg.batch_k {
                    batch_indices.push(pool[s % pool.len()]);
                    labels.push(id);
                }
            }
            let inputs: Vec<&Tensor> = batch_indices
                .iter()
                .map(|&i| &data.samples()[i].features)
                .collect();
            let mut tape = Tape::new();
            let fwd = model.forward_batch(&mut tape, &inputs, Mode::Training)?;
            let centers = tape.param(model.centers_id(), model.params());
            let losses = total_loss(
                &mut tape,
                fwd.logits,
                fwd.embeddings,
                centers,
                &labels,
                &cfg.loss,
            )?;
            sums[0] += tape.scalar_value(losses.total);
            sums[1] += tape.scalar_value(losses.id);
            sums[2] += tape.scalar_value(losses.triplet);
            sums[3] += tape.scalar_value(losses.center);
            batches += 1;
            tape.backward(losses.total, model.params_mut())?;
            adam.step(model.params_mut())?;
        }
        if batches == 0 {
            return Err(Error::Config(
                "no trainable batches — batch_p exceeds the identity count".into(),
            ));
        }
        let train_acc = train_accuracy(model, data)?;
        logs.push(EpochLog {
            epoch,
            loss: sums[0] / batches as f64,
            id_loss: sums[1] / batches as f64,
            triplet_loss: sums[2] / batches as f64,
            center_loss: sums[3] / batches as f64,
            train_acc,
            alphas: model.alphas(),
        });
        if let Some(threshold) = cfg.early_stop_acc {
            if train_acc >= threshold {
                break;
            }
        }
    }
    Ok(logs)
}

/// Evaluation-mode classification accuracy over the training split.
pub fn train_accuracy(model: &mut ToyModel, data: &Dataset) -> Result<f64> {
    let train = data.train();
    if train.is_empty() {
        return Err(Error::Invalid("no training samples to score".into()));
    }
    let mut correct = 0usize;
    for s in &train {
        let mut tape = Tape::new();
        let fwd = model.forward_single(&mut tape, &s.features, Mode::Evaluation)?;
        let logits = tape.value(fwd.logits).data();
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("nonempty logits");
        if argmax == s.id {
            correct += 1;
        }
    }
    Ok(correct as f64 / train.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::SynthConfig;
    use crate::model::{GraphKind, ModelConfig};
    use crate::graph::NeighborMode;

    fn tiny_setup() -> (ToyModel, Dataset) {
        let mcfg = ModelConfig {
            input_channels: 2,
            channels: 6,
            cprime: 3,
            h: 4,
            w: 3,
            classes: 3,
            depth: 1,
            graph: GraphKind::Grid(NeighborMode::Four),
            literal_softmax: false,
            value_projection: false,
            self_loops: false,
        };
        let dcfg = SynthConfig {
            classes: 3,
            per_identity: 8,
            channels: 2,
            h: 4,
            w: 3,
            noise: 0.05,
            occlusion_prob: 0.1,
            shift_max: 1,
        };
        let model = ToyModel::new(mcfg, 0).unwrap();
        let data = Dataset::generate(&dcfg, 1).unwrap();
        (model, data)
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_p: 3,
            batch_k: 2,
            lr: 3e-3,
            weight_decay: 1e-4,
            warmup_iters: 5,
            loss: LossConfig::default(),
            seed: 7,
            early_stop_acc: None,
        }
    }

    #[test]
    fn zero_epochs_returns_an_empty_log() {
        let (mut model, data) = tiny_setup();
        let logs = train(&mut model, &data, &quick_cfg(0)).unwrap();
        assert!(logs.is_empty());
    }

    #[test]
    fn training_runs_and_loss_is_finite() {
        let (mut model, data) = tiny_setup();
        let logs = train(&mut model, &data, &quick_cfg(3)).unwrap();
        assert_eq!(logs.len(), 3);
        for log in &logs {
            assert!(log.loss.is_finite());
            assert!(log.id_loss >= 0.0);
            assert!(log.triplet_loss >= 0.0);
            assert!(log.center_loss >= 0.0);
            assert!((0.0..=1.0).contains(&log.train_acc));
            assert_eq!(log.alphas.len(), 1);
        }
        assert_eq!(logs[0].epoch, 1);
        assert_eq!(logs[2].epoch, 3);
    }

    #[test]
    fn training_is_deterministic() {
        let (mut m1, data) = tiny_setup();
        let (mut m2, _) = tiny_setup();
        let l1 = train(&mut m1, &data, &quick_cfg(2)).unwrap();
        let l2 = train(&mut m2, &data, &quick_cfg(2)).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.train_acc, b.train_acc);
        }
        for (ia, ib) in m1.params().ids().zip(m2.params().ids()) {
            assert_eq!(m1.params().value(ia).data(), m2.params().value(ib).data());
        }
    }

    #[test]
    fn loss_moves_the_parameters_and_the_gates() {
        let (mut model, data) = tiny_setup();
        let before: Vec<f64> = model
            .params()
            .ids()
            .flat_map(|id| model.params().value(id).data().to_vec())
            .collect();
        let alphas_before = model.alphas();
        train(&mut model, &data, &quick_cfg(2)).unwrap();
        let after: Vec<f64> = model
            .params()
            .ids()
            .flat_map(|id| model.params().value(id).data().to_vec())
            .collect();
        assert!(before != after, "training changed nothing");
        assert!(model.alphas() != alphas_before, "gates never moved");
    }

    #[test]
    fn early_stop_cuts_the_run_short() {
        let (mut model, data) = tiny_setup();
        let mut cfg = quick_cfg(50);
        cfg.early_stop_acc = Some(0.0); // any epoch qualifies
        let logs = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(logs.len(), 1);
    }

    #[test]
    fn mismatched_class_counts_are_rejected() {
        let (mut model, _) = tiny_setup();
        let dcfg = SynthConfig {
            classes: 5,
            per_identity: 8,
            channels: 2,
            h: 4,
            w: 3,
            noise: 0.05,
            occlusion_prob: 0.1,
            shift_max: 1,
        };
        let data = Dataset::generate(&dcfg, 1).unwrap();
        assert!(train(&mut model, &data, &quick_cfg(1)).is_err());
    }

    #[test]
    fn config_validation_rejects_thin_batches() {
        let mut cfg = quick_cfg(1);
        cfg.batch_p = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg(1);
        cfg.batch_k = 1;
        assert!(cfg.validate().is_err());
    }
}
