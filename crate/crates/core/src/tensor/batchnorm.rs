//! Batch-normalization state: learned scale/shift plus running statistics.

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch norm bookkeeping.
///
/// The learned scale (`gamma`, init 1) and shift (`beta`, init 0) live in
/// the shared [`ParamSet`]; this struct owns the non-trainable running
/// mean/variance those evaluation-mode forward passes read. Running stats
/// use the biased (population) variance and the update
/// `running = (1 - momentum) * running + momentum * batch`.
///
/// Evaluation mode before any update is an error unless the stats were
/// explicitly seeded with [`BatchNormState::seed_running`].
#[derive(Clone, Debug)]
pub struct BatchNormState {
    name: String,
    channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    initialized: bool,
}

impl BatchNormState {
    /// Fresh state with the default hyperparameters (momentum 0.1,
    /// epsilon 1e-5). Registers `<name>.gamma` and `<name>.beta`.
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Result<Self> {
        Self::with_hyper(params, name, channels, 0.1, 1e-5)
    }

    pub fn with_hyper(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Invalid(format!("batch norm `{name}` needs at least one channel")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Invalid(format!(
                "batch norm `{name}` momentum {momentum} outside [0, 1]"
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::Invalid(format!("batch norm `{name}` epsilon {epsilon} must be > 0")));
        }
        let gamma = params.register(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = params.register(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self {
            name: name.to_string(),
            channels,
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
            initialized: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    pub fn initialized(&self) -> bool {
        self.initialized
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Explicitly seeds the running statistics, marking the state usable in
    /// evaluation mode without prior training.
    pub fn seed_running(&mut self, mean: &[f64], var: &[f64]) -> Result<()> {
        if mean.len() != self.channels || var.len() != self.channels {
            return Err(Error::Invalid(format!(
                "batch norm `{}` seed length {}/{} does not match {} channels",
                self.name,
                mean.len(),
                var.len(),
                self.channels
            )));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid(format!(
                "batch norm `{}` seeded with a negative variance",
                self.name
            )));
        }
        self.running_mean.copy_from_slice(mean);
        self.running_var.copy_from_slice(var);
        self.initialized = true;
        Ok(())
    }

    /// Momentum update from one batch's statistics (training mode only).
    pub(crate) fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
        }
        self.initialized = true;
    }
}
