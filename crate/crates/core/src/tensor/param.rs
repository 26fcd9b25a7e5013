//! Trainable parameters and the arena that owns them.

use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable value with its accumulated gradient.
///
/// Invariant: `grad` always has the same shape as `value`. Gradients
/// accumulate additively across backward passes until explicitly zeroed.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Handle into a [`ParamSet`]. Ids are dense indices in registration order,
/// which also fixes the (deterministic) iteration order of the optimizer
/// and checkpoint code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Arena of all parameters of one model. Names are unique; the set tracks
/// whether any gradient has been populated since the last zeroing so the
/// optimizer can refuse to step on stale zeros.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    populated: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; the gradient starts at zero with the same
    /// shape. Fails on a duplicate name.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::DuplicateParamName(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Looks a parameter up by its registered name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Clears every gradient and the populated flag.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
        self.populated = false;
    }

    /// True once any backward pass has deposited gradients since the last
    /// zeroing.
    pub fn grads_populated(&self) -> bool {
        self.populated
    }

    /// Adds `delta` into the gradient of `id`. Called by the tape during
    /// backward; additive so repeated backward passes stack.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = self.params[id.0].grad.data_mut();
        assert_eq!(g.len(), delta.len(), "gradient length mismatch");
        for (slot, d) in g.iter_mut().zip(delta) {
            *slot += d;
        }
        self.populated = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            ps.register("w", Tensor::zeros(&[3])),
            Err(Error::DuplicateParamName(_))
        ));
    }

    #[test]
    fn grads_start_zero_and_accumulate() {
        let mut ps = ParamSet::new();
        let id = ps.register("w", Tensor::scalar(1.5)).unwrap();
        assert!(!ps.grads_populated());
        ps.accumulate_grad(id, &[2.0]);
        ps.accumulate_grad(id, &[0.5]);
        assert_eq!(ps.grad(id).data(), &[2.5]);
        assert!(ps.grads_populated());
        ps.zero_grads();
        assert_eq!(ps.grad(id).data(), &[0.0]);
        assert!(!ps.grads_populated());
    }

    #[test]
    fn find_returns_registration_ids() {
        let mut ps = ParamSet::new();
        let a = ps.register("a", Tensor::scalar(0.0)).unwrap();
        let b = ps.register("b", Tensor::scalar(0.0)).unwrap();
        assert_eq!(ps.find("a"), Some(a));
        assert_eq!(ps.find("b"), Some(b));
        assert_eq!(ps.find("c"), None);
    }
}
