mod common;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retina_core::dataset::{Dataset, DatasetVariant, Example};
use retina_core::glimpse::ControlState;
use retina_core::model::{unroll, ModelParams, RnnState, Trace, TraceStep, Variant};
use retina_core::training::{
    batch_gradient, evaluate, loss_fn, train, EpochRecord, OptimizerState, TrainConfig, TrainObserver,
};
use retina_core::GlimpseVector;

fn trace_with_logits(logits: &[Vec<f64>]) -> Trace<f64> {
    Trace {
        steps: logits
            .iter()
            .map(|l| TraceStep {
                control: ControlState::centered(4, 4),
                glimpse: GlimpseVector {
                    values: Array1::zeros(1),
                    height: 4,
                    width: 4,
                },
                state: RnnState::zeros(1),
                logits: Array1::from(l.clone()),
                predicted: 0,
                raw_control: [0.0; 3],
            })
            .collect(),
    }
}

#[test]
fn loss_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let steps: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..10).map(|_| rng.random_range(-30.0..30.0)).collect())
            .collect();
        let label = rng.random_range(0..10);
        let loss = loss_fn(&trace_with_logits(&steps), label).unwrap();
        let mut want = 0.0;
        for l in &steps {
            let denom: f64 = l.iter().map(|v| v.exp()).sum();
            want -= (l[label].exp() / denom).ln();
        }
        assert!((loss.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", loss.total);
    }
}

#[test]
fn uniform_logits_cost_four_ln_ten() {
    let loss = loss_fn(&trace_with_logits(&vec![vec![0.3; 10]; 4]), 7).unwrap();
    assert!((loss.total - 4.0 * 10f64.ln()).abs() < 1e-12);
}

#[test]
fn fresh_model_starts_near_uniform() {
    let data = common::fake_dataset(DatasetVariant::Fixed, 64, 2);
    let params = common::model(Variant::TranslationOnly, 12, 512, 0);
    let refs: Vec<&Example> = data.examples.iter().collect();
    let (_, loss) = batch_gradient(&params, &refs, 100, 100, 4);
    let baseline = 4.0 * 10f64.ln();
    assert!((loss - baseline).abs() < 0.05 * baseline, "initial loss {loss}");
}

#[derive(Default)]
struct Recorder {
    losses: Vec<f64>,
    epochs: usize,
    snapshots: Vec<u64>,
}

impl TrainObserver<f32> for Recorder {
    fn on_batch(&mut self, _step: u64, loss: f64) {
        self.losses.push(loss);
    }

    fn on_snapshot(&mut self, step: u64, _params: &ModelParams<f32>) -> retina_core::Result<()> {
        self.snapshots.push(step);
        Ok(())
    }

    fn on_epoch(&mut self, _r: &EpochRecord, _p: &ModelParams<f32>, _o: &OptimizerState<f32>) -> retina_core::Result<()> {
        self.epochs += 1;
        Ok(())
    }
}

#[test]
fn smoke_run_beats_uniform_baseline() {
    let data = common::fake_dataset(DatasetVariant::Fixed, 500, 5);
    let params = common::model(Variant::TranslationOnly, 12, 128, 1);
    let config = TrainConfig {
        batch_size: 25,
        epochs: 10,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut rec = Recorder::default();
    let (_, opt, log) = train(params, None, &data, None, &config, &mut rec).unwrap();
    assert_eq!(opt.step, 200);
    let last = log.records.last().unwrap();
    assert!(last.train_loss < 4.0 * 10f64.ln(), "final epoch loss {}", last.train_loss);
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (head, tail) = (window(&rec.losses[..50]), window(&rec.losses[150..]));
    assert!(tail < head, "moving average rose from {head} to {tail}");
    assert_eq!(rec.snapshots.first(), Some(&0));
    assert_eq!(rec.snapshots.last(), Some(&200));
}

fn small_run(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        variant,
        batch_size: 8,
        epochs,
        seed: 3,
        lattice_lr_scale: 10.0,
        ..TrainConfig::default()
    }
}

#[test]
fn capability_masks_hold_through_training() {
    let data = common::fake_dataset(DatasetVariant::VariableSize, 48, 6);

    let fixed = common::model(Variant::FixedLattice, 4, 16, 2);
    let (trained, _, _) = train(fixed.clone(), None, &data, None, &small_run(Variant::FixedLattice, 3), &mut ()).unwrap();
    assert_eq!(trained.lattice.mu, fixed.lattice.mu);
    assert_eq!(trained.lattice.log_sigma, fixed.lattice.log_sigma);
    assert_ne!(trained.w_in, fixed.w_in);

    let translate = common::model(Variant::TranslationOnly, 4, 16, 2);
    let (trained, _, _) = train(translate.clone(), None, &data, None, &small_run(Variant::TranslationOnly, 3), &mut ()).unwrap();
    assert_ne!(trained.lattice.mu, translate.lattice.mu);
    for e in &data.examples {
        let trace = unroll(&trained, e.image::<f32>(100, 100).view(), 4).unwrap();
        assert!(trace.steps.iter().all(|s| s.control.zoom == 1.0));
    }
}

#[test]
fn runs_are_reproducible() {
    let data = common::fake_dataset(DatasetVariant::Fixed, 40, 8);
    let config = small_run(Variant::TranslationZoom, 2);
    let go = || train(common::model(Variant::TranslationZoom, 3, 8, 4), None, &data, Some(&data), &config, &mut ()).unwrap();
    let (a, oa, la) = go();
    let (b, ob, lb) = go();
    assert_eq!(a, b);
    assert_eq!(oa, ob);
    let strip = |l: &retina_core::training::MetricsLog| {
        l.records.iter().map(|r| (r.step, r.train_loss, r.eval_error.clone())).collect::<Vec<_>>()
    };
    assert_eq!(strip(&la), strip(&lb));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let data = common::fake_dataset(DatasetVariant::Fixed, 36, 8);
    let init = common::model(Variant::TranslationZoom, 3, 8, 4);
    let (full, full_opt, _) = train(init.clone(), None, &data, None, &small_run(Variant::TranslationZoom, 3), &mut ()).unwrap();
    let (half, half_opt, _) = train(init, None, &data, None, &small_run(Variant::TranslationZoom, 1), &mut ()).unwrap();
    let mut rec = Recorder::default();
    let (resumed, resumed_opt, log) =
        train(half, Some(half_opt), &data, None, &small_run(Variant::TranslationZoom, 3), &mut rec).unwrap();
    assert_eq!(full, resumed);
    assert_eq!(full_opt, resumed_opt);
    assert_eq!(log.records.len(), 2);
    assert_eq!(log.records[0].epoch, 2);
    assert!(!rec.snapshots.contains(&0));
}

#[test]
fn one_epoch_without_observer_logs_one_record() {
    let data = common::fake_dataset(DatasetVariant::Fixed, 10, 1);
    let (_, _, log) = train(common::model(Variant::FixedLattice, 2, 4, 0), None, &data, None, &small_run(Variant::FixedLattice, 1), &mut ()).unwrap();
    assert_eq!(log.records.len(), 1);
    assert!(log.records[0].eval_error.is_empty());
}

#[test]
fn zero_weight_model_guesses_at_chance() {
    let data = common::fake_dataset(DatasetVariant::Fixed, 1000, 12);
    let mut params = common::model(Variant::TranslationOnly, 3, 8, 0);
    for (name, mut t) in params.tensors_mut() {
        if !name.starts_with("lattice") {
            t.fill(0.0);
        }
    }
    let errors = evaluate(&params, &data, 4).unwrap();
    for e in errors {
        assert!((e - 0.9).abs() < 0.03, "error {e}");
    }
}

#[test]
fn memorized_examples_score_zero_error() {
    // Prediction bias alone picks the single class present.
    let mut data = common::fake_dataset(DatasetVariant::Fixed, 30, 2);
    data.examples.retain(|e| e.label == 3);
    let data = Dataset {
        config: data.config.clone(),
        examples: data.examples,
    };
    let mut params = common::model(Variant::TranslationOnly, 3, 8, 0);
    params.b_predict = Array1::from_iter((0..10).map(|c| if c == 3 { 5.0 } else { 0.0 }));
    params.w_predict = Array2::zeros(params.w_predict.dim());
    assert_eq!(evaluate(&params, &data, 4).unwrap(), vec![0.0; 4]);
}

#[test]
fn empty_training_set_is_rejected() {
    let mut data = common::fake_dataset(DatasetVariant::Fixed, 3, 1);
    data.examples.clear();
    let err = train(common::model(Variant::FixedLattice, 2, 4, 0), None, &data, None, &small_run(Variant::FixedLattice, 1), &mut ()).unwrap_err();
    assert!(err.to_string().contains("empty"));
}
