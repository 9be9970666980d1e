use ndarray::{ArrayViewD, Axis, Dimension};

use super::TrainConfig;
use crate::model::{ModelParams, Variant};
use crate::real::Real;

/// Adam moments, congruent with the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn cast<G: Real>(&self) -> OptimizerState<G> {
        OptimizerState {
            step: self.step,
            m: self.m.cast(),
            v: self.v.cast(),
        }
    }
}

/// Which entries of a tensor a variant may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMask {
    Trainable,
    Frozen,
    /// Everything except the zoom output (row or entry 2).
    AllButZoom,
}

impl ParamMask {
    pub fn for_tensor(variant: Variant, name: &str) -> Self {
        if name.starts_with("lattice/") && !variant.learns_lattice() {
            ParamMask::Frozen
        } else if name.starts_with("control/") && !variant.uses_zoom() {
            ParamMask::AllButZoom
        } else {
            ParamMask::Trainable
        }
    }

    fn allows(self, index: &[usize]) -> bool {
        match self {
            ParamMask::Trainable => true,
            ParamMask::Frozen => false,
            ParamMask::AllButZoom => index[0] != 2,
        }
    }
}

/// L2 norm over every tensor, accumulated in `f64`.
pub fn global_norm<F: Real>(grads: &ModelParams<F>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().map(|v| v.as_f64() * v.as_f64()).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt()
}

fn masked_sq_norm<F: Real>(t: &ArrayViewD<'_, F>, mask: ParamMask) -> f64 {
    match mask {
        ParamMask::Trainable => t.iter().map(|v| v.as_f64() * v.as_f64()).sum(),
        ParamMask::Frozen => 0.0,
        ParamMask::AllButZoom => t
            .indexed_iter()
            .filter(|(ix, _)| mask.allows(ix.slice()))
            .map(|(_, v)| v.as_f64() * v.as_f64())
            .sum(),
    }
}

/// One Adam update with bias correction.
///
/// The variant's capability mask is applied first: masked entries (and
/// their moments) are left untouched. Remaining gradients are clipped to
/// `grad_clip` global norm before the moment update. Returns the
/// pre-clipping norm of the masked gradient.
pub fn adam_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptimizerState<F>,
    config: &TrainConfig,
) -> f64 {
    let variant = params.variant;
    let norm = grads
        .tensors()
        .iter()
        .map(|(name, t)| masked_sq_norm(t, ParamMask::for_tensor(variant, name)))
        .sum::<f64>()
        .sqrt();
    let clip = match config.grad_clip {
        Some(c) if norm > c => F::lit(c / norm),
        _ => F::one(),
    };

    state.step += 1;
    let t = state.step as i32;
    let b1 = F::lit(config.beta1);
    let b2 = F::lit(config.beta2);
    let one = F::one();
    let bias1 = F::lit(1.0 - config.beta1.powi(t));
    let bias2 = F::lit(1.0 - config.beta2.powi(t));
    let eps = F::lit(config.eps);

    let tensors = params.tensors_mut();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    let g = grads.tensors();
    for (((( name, mut p), (_, mut m)), (_, mut v)), (_, g)) in
        tensors.into_iter().zip(m).zip(v).zip(g)
    {
        let mask = ParamMask::for_tensor(variant, name);
        if mask == ParamMask::Frozen {
            continue;
        }
        let scale = if name.starts_with("lattice/") {
            config.lattice_lr_scale
        } else {
            1.0
        };
        let lr = F::lit(config.learning_rate * scale);
        let update = |p: &mut F, m: &mut F, v: &mut F, g: F| {
            let g = g * clip;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        };
        if mask == ParamMask::Trainable {
            ndarray::Zip::from(&mut p)
                .and(&mut m)
                .and(&mut v)
                .and(&g)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        } else {
            for (row, ((mut p, mut m), (mut v, g))) in p
                .axis_iter_mut(Axis(0))
                .zip(m.axis_iter_mut(Axis(0)))
                .zip(v.axis_iter_mut(Axis(0)).zip(g.axis_iter(Axis(0))))
                .enumerate()
            {
                if !mask.allows(&[row]) {
                    continue;
                }
                ndarray::Zip::from(&mut p)
                    .and(&mut m)
                    .and(&mut v)
                    .and(&g)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
        }
    }
    norm
}
