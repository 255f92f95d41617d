//! Central-difference verification of tape gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error between an analytic and a numeric derivative:
/// `|a − n| / max(1e-12, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-12f64).max(analytic.abs() + numeric.abs())
}

/// Compares a precomputed analytic gradient against central differences of
/// `eval` and returns the worst relative error over every coordinate.
///
/// Non-finite function values at perturbed points are an error.
pub fn finite_diff_max_rel_err<F>(
    eval: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::config("finite differences need eps > 0"));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "gradient list",
            &[params.len()],
            &[analytic.len()],
        ));
    }
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, pt) in params.iter().enumerate() {
        for c in 0..pt.numel() {
            let base = pt.data()[c];
            work[p].data_mut()[c] = base + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[c] = base - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[c] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::non_finite("finite-difference probe"));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[p].data()[c], numeric));
        }
    }
    Ok(worst)
}

/// Builds a scalar function on a fresh tape, computes its analytic gradient
/// via the reverse pass, then checks that gradient against central
/// differences. Returns the max relative error over all parameters.
///
/// `build` is handed one parameter node per input tensor, in order, and
/// returns the scalar loss node.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    tape.value(loss).scalar_value()?; // enforces a scalar seed
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, t)| grads.get(id, t.shape()))
        .collect();

    finite_diff_max_rel_err(
        |values| {
            let mut probe = Tape::new();
            let ids: Vec<NodeId> = values.iter().map(|t| probe.param(t.clone())).collect();
            let loss = build(&mut probe, &ids)?;
            probe.value(loss).scalar_value()
        },
        params,
        &analytic,
        eps,
    )
}
