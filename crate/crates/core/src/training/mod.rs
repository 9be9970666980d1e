//! Loss, optimizer, training loop, evaluation, checkpoints and gradient checks.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod loss;
mod trainer;

pub use adam::{adam_step, global_norm, OptimizerState, ParamMask};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{loss_fn, nll, Loss};
pub use trainer::{
    batch_gradient, evaluate, snapshot_interval, train, EpochRecord, MetricsLog, TrainObserver, CHUNK_SIZE,
};

use crate::error::{Error, Result};
use crate::model::Variant;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Glimpses per episode.
    pub glimpses: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Learning-rate multiplier for the lattice tensors.
    pub lattice_lr_scale: f64,
    /// Snapshot cadence in steps; `None` means every 5% of the run.
    pub snapshot_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            glimpses: 4,
            batch_size: 128,
            epochs: 100,
            seed: 0,
            variant: Variant::TranslationOnly,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
            lattice_lr_scale: 30.0,
            snapshot_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.glimpses == 0 {
            return Err(Error::invalid("glimpse count must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("gradient clip must be positive"));
            }
        }
        if !(self.lattice_lr_scale >= 0.0) {
            return Err(Error::invalid("lattice learning-rate scale must be non-negative"));
        }
        Ok(())
    }
}
