//! Central finite-difference verification of tape gradients.
//!
//! [`finite_diff_check`] is the oracle used by the test suite: it rebuilds a
//! user-supplied loss graph at perturbed parameter values and compares central
//! differences against the analytic gradients from [`Tape::backward`].

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, ValueRef};
use crate::tensor::Tensor;

/// Builds a scalar loss from leaves that the harness registers on the tape.
/// The closure must be deterministic: two calls with identical inputs must
/// produce bit-identical losses, otherwise the check aborts with an oracle error.
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, leaves: &[ValueRef]) -> Result<ValueRef>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &[ValueRef]) -> Result<ValueRef>,
{
    fn build(&self, tape: &mut Tape, leaves: &[ValueRef]) -> Result<ValueRef> {
        self(tape, leaves)
    }
}

fn eval_loss(builder: &dyn LossBuilder, params: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        leaves.push(tape.param(ParamId(i), p.clone())?);
    }
    let loss = builder.build(&mut tape, &leaves)?;
    tape.scalar_value(loss)
}

/// Compares analytic gradients against central finite differences.
///
/// Returns the maximum over all parameter entries of
/// `|analytic - central| / max(|analytic|, |central|, 1e-12)`.
pub fn finite_diff_check(
    builder: &dyn LossBuilder,
    params: &[Tensor],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("finite_diff_check eps must be positive, got {eps}")));
    }
    if params.is_empty() {
        return Err(Error::Contract("finite_diff_check needs at least one parameter".into()));
    }

    // Determinism guard: the closure must be a pure function of the leaves.
    let base_a = eval_loss(builder, params)?;
    let base_b = eval_loss(builder, params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Oracle(
            "loss builder is non-deterministic: two evaluations at the same point differ".into(),
        ));
    }

    // Analytic gradients from one reverse pass.
    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        leaves.push(tape.param(ParamId(i), p.clone())?);
    }
    let loss = builder.build(&mut tape, &leaves)?;
    let analytic = tape.backward(loss)?;

    let mut max_rel = 0.0f64;
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let grad = &analytic[&ParamId(pi)];
        for ei in 0..p.len() {
            let mut bump = |delta: f64| -> Result<f64> {
                let mut data = p.data().to_vec();
                data[ei] += delta;
                perturbed[pi] = Tensor::new(p.shape().to_vec(), data)?;
                let v = eval_loss(builder, &perturbed)?;
                Ok(v)
            };
            let plus = bump(eps)?;
            let minus = bump(-eps)?;
            perturbed[pi] = p.clone();
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
