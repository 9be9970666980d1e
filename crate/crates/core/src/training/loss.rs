use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::model::Trace;
use crate::real::Real;

/// Summed and per-timestep negative log-likelihood of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss<F> {
    pub total: F,
    pub per_step: Vec<F>,
}

/// `-log softmax(logits)[label]`, computed with max subtraction.
pub fn nll<F: Real>(logits: ArrayView1<'_, F>, label: usize) -> F {
    let peak = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let total: F = logits.iter().map(|&v| (v - peak).exp()).sum();
    peak + total.ln() - logits[label]
}

/// Cross-entropy applied at every timestep and summed over the episode.
pub fn loss_fn<F: Real>(trace: &Trace<F>, label: usize) -> Result<Loss<F>> {
    if trace.is_empty() {
        return Err(Error::invalid("empty trace"));
    }
    let classes = trace.steps[0].logits.len();
    if label >= classes {
        return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
    }
    let per_step: Vec<F> = trace.steps.iter().map(|s| nll(s.logits.view(), label)).collect();
    let total = per_step.iter().copied().sum();
    Ok(Loss { total, per_step })
}
