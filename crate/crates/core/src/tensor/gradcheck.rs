//! Independent gradient oracle: central finite differences over parameter
//! coordinates, plus the comparison metric used by every gradient check.
//!
//! The numeric side never touches the reverse pass — each probe rebuilds
//! the forward computation from scratch on a throwaway tape — so agreement
//! between the two is evidence, not tautology.

use super::param::ParamSet;
use super::tape::{Tape, ValueId};
use super::Tensor;
use crate::error::{Error, Result};

/// Largest elementwise relative error `|a − n| / max(1e-12, |a| + |n|)`
/// between an analytic and a numeric gradient, flattened over all entries.
/// Panics if the two slices disagree in length — that is a harness bug,
/// not a gradient discrepancy.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / f64::max(1e-12, a.abs() + n.abs()))
        .fold(0.0, f64::max)
}

/// Central finite-difference gradients of a scalar-valued function of the
/// parameters, one tensor per parameter in registration order. Each
/// coordinate is perturbed by ±`step` and restored exactly afterwards.
pub fn finite_diff_gradients<F>(
    params: &mut ParamSet,
    step: f64,
    mut f: F,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step {step} must be > 0")));
    }
    let ids: Vec<_> = params.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for &id in &ids {
        let numel = params.value(id).numel();
        let shape = params.value(id).shape().to_vec();
        let mut grad = vec![0.0; numel];
        for i in 0..numel {
            let original = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = original + step;
            let plus = f(params)?;
            params.value_mut(id).data_mut()[i] = original - step;
            let minus = f(params)?;
            params.value_mut(id).data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("finite-difference probe".into()));
            }
            grad[i] = (plus - minus) / (2.0 * step);
        }
        out.push(Tensor::new(&shape, grad)?);
    }
    Ok(out)
}

/// Coordinates where analytic and numeric magnitudes together stay at or
/// below this are excluded from the comparison in [`finite_diff_check`].
/// Central differences at step 1e-5 in f64 resolve gradients only down to
/// roughly 1e-10 (the difference of two ~1e-16-rounded evaluations
/// divided by 2e-5), so below this scale both estimates are rounding
/// noise and their ratio is meaningless — e.g. a convolution bias feeding
/// a training-mode batch norm, whose true gradient is identically zero
/// because the mean subtraction absorbs it, or a score shift a softmax
/// row happens to absorb. A check that needs to certify an exact-zero
/// gradient must assert it on the analytic side directly.
pub const FD_NOISE_FLOOR: f64 = 1e-6;

/// Full gradient check of a recorded computation: runs the builder once on
/// a fresh tape, backpropagates, then compares every parameter gradient
/// against [`finite_diff_gradients`] of the same builder evaluated
/// value-only. Returns the worst relative error across all comparable
/// coordinates (see [`FD_NOISE_FLOOR`] for what is comparable).
///
/// The builder must be deterministic given the parameter values; anything
/// stateful it captures (batch-norm running statistics, RNGs) must be
/// reset inside the closure on every call.
pub fn finite_diff_check<F>(params: &mut ParamSet, step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&ParamSet, &mut Tape) -> Result<ValueId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::InvalidShape {
            context: "gradient check loss".into(),
            shape: tape.value(loss).shape().to_vec(),
            reason: "loss must be a scalar".into(),
        });
    }
    params.zero_grads();
    tape.backward(loss, params)?;
    let ids: Vec<_> = params.ids().collect();
    let analytic: Vec<Tensor> = ids.iter().map(|&id| params.grad(id).clone()).collect();
    params.zero_grads();

    // Numeric pass, value-only.
    let numeric = finite_diff_gradients(params, step, |p| {
        let mut probe = Tape::new();
        let loss = f(p, &mut probe)?;
        Ok(probe.scalar_value(loss))
    })?;

    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            if av.abs() + nv.abs() <= FD_NOISE_FLOOR {
                continue;
            }
            worst = worst.max(max_relative_error(&[av], &[nv]));
        }
    }
    Ok(worst)
}
