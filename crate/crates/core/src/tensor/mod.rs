//! Minimal float64 tensor core with a reverse-mode tape.
//!
//! [`Tensor`] is a dense row-major buffer plus a shape. [`Tape`] records
//! every differentiable op applied to values it owns and replays them in
//! reverse to accumulate gradients; [`ParamSet`] is the arena of trainable
//! parameters those gradients land in. [`BatchNormState`] carries the
//! running statistics that make evaluation-mode forward passes
//! deterministic, and [`finite_diff_check`] is the independent
//! central-difference oracle every backward rule is held to.

mod batchnorm;
mod gradcheck;
mod param;
mod tape;

pub use batchnorm::BatchNormState;
pub use gradcheck::{
    finite_diff_check, finite_diff_gradients, max_relative_error, FD_NOISE_FLOOR,
};
pub use param::{ParamId, ParamSet, Parameter};
pub use tape::{Gradients, Tape, ValueId};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Whether a forward pass uses batch statistics (and updates running ones)
/// or frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Evaluation,
}

/// Dense row-major tensor of `f64` values.
///
/// Invariants: the shape is a non-empty list of extents, every extent is at
/// least 1, and `data.len()` equals the product of the extents. Scalars are
/// represented as shape `[1]`. `reshape` never reorders the buffer; any
/// layout change (transposes, map↔node conversions) goes through a tape op
/// that produces a new buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a matching buffer.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        validate_shape(shape, "Tensor::new")?;
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::InvalidShape {
                context: "Tensor::new".into(),
                shape: shape.to_vec(),
                reason: format!("buffer has {} elements, shape needs {expect}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// All-zero tensor. Panics on a malformed shape (programmer error).
    pub fn zeros(shape: &[usize]) -> Self {
        validate_shape(shape, "Tensor::zeros").expect("valid shape");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], v: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(v);
        t
    }

    /// Scalar tensor, shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    /// Tensor built from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut f = f;
        for (i, slot) in t.data.iter_mut().enumerate() {
            *slot = f(i);
        }
        t
    }

    /// Standard-normal samples, one RNG draw per element in flat order.
    pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for slot in t.data.iter_mut() {
            *slot = rng.sample(StandardNormal);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same buffer under a new shape with the same element count. Never
    /// reorders anything.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape, "Tensor::reshape")?;
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::reshape".into(),
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Element at a multi-index (row-major strides).
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    /// Sets the element at a multi-index.
    pub fn set(&mut self, index: &[usize], v: f64) {
        let i = self.flat_index(index);
        self.data[i] = v;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} (extent {ext})");
            flat = flat * ext + ix;
        }
        flat
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn validate_shape(shape: &[usize], context: &str) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            context: context.into(),
            shape: shape.to_vec(),
            reason: "shape must have at least one axis".into(),
        });
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::InvalidShape {
            context: context.into(),
            shape: shape.to_vec(),
            reason: "every extent must be at least 1".into(),
        });
    }
    Ok(())
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_buffer_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zero_extents_are_rejected() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn reshape_keeps_buffer_order() {
        let t = Tensor::new(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn multi_index_uses_row_major_strides() {
        let t = Tensor::new(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn sigmoid_matches_reference_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-40.0) < 1e-12);
        let x = 1.7;
        assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
    }
}
