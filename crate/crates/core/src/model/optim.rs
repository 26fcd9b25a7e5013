//! Adam with decoupled weight decay and a linear learning-rate warmup.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// Decoupled weight decay: subtracted as `lr_t * wd * theta`, outside
    /// the moment estimates.
    pub weight_decay: f64,
    /// Steps over which the learning rate ramps linearly from a tenth of
    /// `lr` up to `lr`; 0 disables the ramp.
    pub warmup_iters: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64, warmup_iters: usize) -> Self {
        Self { lr, weight_decay, warmup_iters, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-parameter moment estimates plus the step counter.
pub struct AdamState {
    cfg: AdamConfig,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let m = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        let v = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        Ok(Self { cfg, t: 0, m, v })
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Learning rate the next step will use (warmup-ramped).
    pub fn next_lr(&self) -> f64 {
        let t = self.t + 1;
        if self.cfg.warmup_iters == 0 {
            return self.cfg.lr;
        }
        let progress = (t as f64 / self.cfg.warmup_iters as f64).min(1.0);
        self.cfg.lr * (0.1 + 0.9 * progress)
    }

    /// Applies one update from the gradients accumulated in `params`,
    /// then zeroes them. Refuses to step on never-populated gradients —
    /// that always means a missing backward call.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<f64> {
        if !params.grads_populated() {
            return Err(Error::UnpopulatedGradients);
        }
        let lr = self.next_lr();
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (slot, &id) in ids.iter().enumerate() {
            // Pull the gradient out first; the value update needs &mut.
            let grad = params.grad(id).data().to_vec();
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}`",
                    params.get(id).name
                )));
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let theta = params.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.epsilon)
                    + self.cfg.weight_decay * theta[i]);
            }
        }
        params.zero_grads();
        Ok(lr)
    }
}
