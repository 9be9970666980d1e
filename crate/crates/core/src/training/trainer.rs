use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, OptimizerState};
use super::loss::nll;
use super::TrainConfig;
use crate::dataset::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::real::Real;

/// Examples per unit of parallel work. Fixed so that gradient sums (and
/// hence whole runs) do not depend on the thread count.
pub const CHUNK_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    /// Mean per-example loss over the epoch's batches.
    pub train_loss: f64,
    /// Evaluation error per timestep; empty without an evaluation set.
    pub eval_error: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub glimpses: usize,
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn csv_header(glimpses: usize) -> String {
        let mut h = String::from("epoch,step,train_loss");
        for t in 1..=glimpses {
            h.push_str(&format!(",eval_error_t{t}"));
        }
        h.push_str(",wall_seconds");
        h
    }

    pub fn csv_row(record: &EpochRecord, glimpses: usize) -> String {
        let mut row = format!("{},{},{}", record.epoch, record.step, record.train_loss);
        for t in 0..glimpses {
            match record.eval_error.get(t) {
                Some(e) => row.push_str(&format!(",{e}")),
                None => row.push(','),
            }
        }
        row.push_str(&format!(",{:.3}", record.wall_seconds));
        row
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(self.glimpses);
        out.push('\n');
        for r in &self.records {
            out.push_str(&Self::csv_row(r, self.glimpses));
            out.push('\n');
        }
        out
    }
}

/// Hooks invoked by [`train`]. All methods default to no-ops.
pub trait TrainObserver<F> {
    /// Called at step 0, every snapshot interval, and after the last step.
    fn on_snapshot(&mut self, _step: u64, _params: &ModelParams<F>) -> Result<()> {
        Ok(())
    }

    fn on_batch(&mut self, _step: u64, _loss: f64) {}

    fn on_epoch(
        &mut self,
        _record: &EpochRecord,
        _params: &ModelParams<F>,
        _opt: &OptimizerState<F>,
    ) -> Result<()> {
        Ok(())
    }
}

impl<F> TrainObserver<F> for () {}

/// Default snapshot cadence: every 5% of the run, at least every step.
pub fn snapshot_interval(total_steps: u64) -> u64 {
    (total_steps as f64 * 0.05).ceil().max(1.0) as u64
}

fn stack_images<F: Real>(examples: &[&Example], height: usize, width: usize) -> Array3<F> {
    let inv = F::one() / F::lit(255.0);
    let mut out = Array3::zeros((examples.len(), height, width));
    for (mut plane, e) in out.outer_iter_mut().zip(examples) {
        for (dst, &src) in plane.iter_mut().zip(&e.pixels) {
            *dst = F::lit(src as f64) * inv;
        }
    }
    out
}

/// Mean gradient and mean per-example loss over a batch.
///
/// Work is split into [`CHUNK_SIZE`] pieces on the current rayon pool and
/// reduced in chunk order.
pub fn batch_gradient<F: Real>(
    params: &ModelParams<F>,
    examples: &[&Example],
    height: usize,
    width: usize,
    glimpses: usize,
) -> (ModelParams<F>, f64) {
    let parts: Vec<(ModelParams<F>, f64)> = examples
        .par_chunks(CHUNK_SIZE)
        .map(|chunk| {
            let images = stack_images::<F>(chunk, height, width);
            let labels: Vec<usize> = chunk.iter().map(|e| e.label as usize).collect();
            let trace = model::unroll_batch(params, images.view(), glimpses);
            let mut loss = 0.0;
            for step in &trace.steps {
                for (row, &label) in step.logits.outer_iter().zip(&labels) {
                    loss += nll(row, label).as_f64();
                }
            }
            let grads = model::backward_batch(params, images.view(), &labels, &trace, F::one());
            (grads, loss)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut total, mut loss) = iter.next().expect("non-empty batch");
    for (g, l) in iter {
        total.add_scaled(&g, F::one());
        loss += l;
    }
    let n = examples.len();
    total.scale(F::one() / F::lit(n as f64));
    (total, loss / n as f64)
}

/// Per-timestep classification error of `params` on `dataset`.
pub fn evaluate<F: Real>(params: &ModelParams<F>, dataset: &Dataset, glimpses: usize) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if glimpses == 0 {
        return Err(Error::invalid("glimpse count must be at least 1"));
    }
    let (height, width) = dataset.dims();
    let refs: Vec<&Example> = dataset.examples.iter().collect();
    let wrong: Vec<Vec<usize>> = refs
        .par_chunks(CHUNK_SIZE)
        .map(|chunk| {
            let images = stack_images::<F>(chunk, height, width);
            let trace = model::unroll_batch(params, images.view(), glimpses);
            model::batch_predictions(&trace)
                .iter()
                .map(|preds| {
                    preds
                        .iter()
                        .zip(chunk.iter())
                        .filter(|(&p, e)| p != e.label as usize)
                        .count()
                })
                .collect()
        })
        .collect();
    let n = dataset.len() as f64;
    Ok((0..glimpses)
        .map(|t| wrong.iter().map(|w| w[t]).sum::<usize>() as f64 / n)
        .collect())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn largest_block<F: Real>(grads: &ModelParams<F>) -> (String, f64) {
    let mut best = (String::new(), f64::NEG_INFINITY);
    for (name, t) in grads.tensors() {
        let norm = t.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm.is_nan() || norm > best.1 {
            best = (name.to_string(), norm);
            if norm.is_nan() {
                break;
            }
        }
    }
    best
}

/// Minibatch BPTT with Adam.
///
/// Pass `opt` from a checkpoint to resume: training continues from
/// `opt.step`, re-deriving the epoch's shuffle from `(seed, epoch)`.
pub fn train<F: Real>(
    mut params: ModelParams<F>,
    opt: Option<OptimizerState<F>>,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<F>,
) -> Result<(ModelParams<F>, OptimizerState<F>, MetricsLog)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if params.variant != config.variant {
        return Err(Error::invalid(format!(
            "parameters are for variant {}, config asks for {}",
            params.variant, config.variant
        )));
    }
    let mut opt = opt.unwrap_or_else(|| OptimizerState::new(&params));
    let (height, width) = train_set.dims();
    let n = train_set.len();
    let per_epoch = n.div_ceil(config.batch_size) as u64;
    let total = per_epoch * config.epochs as u64;
    let interval = config.snapshot_every.unwrap_or_else(|| snapshot_interval(total)).max(1);
    let mut log = MetricsLog {
        glimpses: config.glimpses,
        records: Vec::new(),
    };
    if opt.step == 0 {
        observer.on_snapshot(0, &params)?;
    }
    let start = Instant::now();
    let first_epoch = (opt.step / per_epoch) as usize;

    for epoch in first_epoch..config.epochs {
        let order = epoch_order(n, config.seed, epoch);
        let skip = (opt.step - epoch as u64 * per_epoch) as usize;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, idx) in order.chunks(config.batch_size).enumerate().skip(skip) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set.examples[i]).collect();
            let (grads, loss) = batch_gradient(&params, &batch, height, width, config.glimpses);
            let grad_norm = super::adam::global_norm(&grads);
            if !loss.is_finite() || !grad_norm.is_finite() {
                let (block, norm) = largest_block(&grads);
                return Err(Error::NonFinite {
                    batch: batch_idx,
                    step: opt.step,
                    block,
                    norm,
                });
            }
            adam_step(&mut params, &grads, &mut opt, config);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            observer.on_batch(opt.step, loss);
            if opt.step % interval == 0 || opt.step == total {
                observer.on_snapshot(opt.step, &params)?;
            }
        }
        let eval_error = match eval_set {
            Some(e) => evaluate(&params, e, config.glimpses)?,
            None => Vec::new(),
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            step: opt.step,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            eval_error,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        observer.on_epoch(&record, &params, &opt)?;
        log.records.push(record);
    }
    Ok((params, opt, log))
}
