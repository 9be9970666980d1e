//! Central finite-difference verification of every analytic gradient.
//!
//! Each trial draws a small random instance per model variant and compares
//! the backward pass against `(L(x + h) - L(x - h)) / 2h` for every scalar
//! parameter, in `f64`. A separate check covers the glimpse operator alone,
//! including image, control-center and zoom gradients.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::glimpse::{self, ControlState, Lattice, Window};
use crate::model::{self, ModelDims, ModelParams, Trace, Variant, ZOOM_LOG_LIMIT};
use crate::training::loss_fn;

/// Image side of a gradcheck instance.
pub const IMAGE_SIDE: usize = 8;
/// Kernel count of a gradcheck instance.
pub const KERNELS: usize = 4;
/// Hidden units per recurrent layer of a gradcheck instance.
pub const HIDDEN: usize = 8;
/// Glimpses per gradcheck episode.
pub const GLIMPSES: usize = 2;

/// Instances whose ReLU pre-activations or zoom clamp input sit closer than
/// this to a kink are redrawn.
const KINK_MARGIN: f64 = 5e-3;
const MAX_REDRAWS: usize = 1000;

/// Deliberate gradient corruption used as a negative control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales every analytic `log_sigma` gradient by 1.01.
    SigmaGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Finite-difference half step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient vanishes are judged on absolute error.
    pub floor: f64,
    pub fault: Fault,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    /// `<variant>/<tensor>` or `glimpse/<input>`.
    pub block: String,
    pub worst: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    /// Block summaries in a stable order.
    pub blocks: Vec<BlockReport>,
    /// Instances redrawn for lying too close to a kink.
    pub redrawn: usize,
    /// Frozen-lattice gradients that were not exactly zero.
    pub nonzero_frozen: usize,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&BlockReport> {
        self.blocks
            .iter()
            .filter(|b| !(b.worst <= self.config.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && self.nonzero_frozen == 0
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.worst).fold(0.0, f64::max)
    }

    /// One line per block, then a verdict line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let mark = if b.worst <= self.config.tolerance { "ok  " } else { "FAIL" };
            out.push_str(&format!("{mark} {:<34} worst rel err {:.3e} over {} entries\n", b.block, b.worst, b.entries));
        }
        if self.nonzero_frozen > 0 {
            out.push_str(&format!("FAIL {} frozen lattice gradients were non-zero\n", self.nonzero_frozen));
        }
        out.push_str(&format!(
            "{} trials, {} instances redrawn, tolerance {:e}: {}\n",
            self.config.trials,
            self.redrawn,
            self.config.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

struct Instance {
    params: ModelParams<f64>,
    image: Array2<f64>,
    label: usize,
}

fn uniform_fill<R: Rng>(t: &mut ArrayViewMutD<'_, f64>, lo: f64, hi: f64, rng: &mut R) {
    t.mapv_inplace(|_| rng.random_range(lo..hi));
}

fn random_lattice<R: Rng>(rng: &mut R) -> Lattice<f64> {
    let mu = Array2::from_shape_simple_fn((KERNELS, 2), || rng.random_range(-3.0..3.0));
    let log_sigma = Array1::from_shape_simple_fn(KERNELS, || rng.random_range(0.6f64..2.0).ln());
    Lattice::new(mu, log_sigma).expect("valid lattice")
}

fn random_image<R: Rng>(rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((IMAGE_SIDE, IMAGE_SIDE), || rng.random_range(0.0..1.0))
}

fn draw_instance<R: Rng>(variant: Variant, rng: &mut R) -> Instance {
    let dims = ModelDims {
        kernels: KERNELS,
        hidden: HIDDEN,
        classes: 10,
    };
    let lattice = random_lattice(rng);
    let mut params = ModelParams::init(dims, variant, Window::Full, lattice, rng).expect("shapes");
    for (name, mut t) in params.tensors_mut() {
        if !name.starts_with("lattice/") {
            uniform_fill(&mut t, -0.6, 0.6, rng);
        }
    }
    Instance {
        params,
        image: random_image(rng),
        label: rng.random_range(0..10),
    }
}

/// Smallest distance of any ReLU input or zoom clamp input to its kink.
fn kink_distance(params: &ModelParams<f64>, trace: &Trace<f64>) -> f64 {
    let mut worst = f64::INFINITY;
    let mut h1_prev = Array1::zeros(HIDDEN);
    let mut h2_prev = Array1::zeros(HIDDEN);
    for step in &trace.steps {
        let pre1 = params.w_in.dot(&step.glimpse.values) + params.w_rec1.dot(&h1_prev) + &params.b1;
        let pre2 = params.w_12.dot(&step.state.h1) + params.w_rec2.dot(&h2_prev) + &params.b2;
        for v in pre1.iter().chain(pre2.iter()) {
            worst = worst.min(v.abs());
        }
        if params.variant.uses_zoom() {
            worst = worst.min((step.raw_control[2].abs() - ZOOM_LOG_LIMIT).abs());
        }
        h1_prev = step.state.h1.clone();
        h2_prev = step.state.h2.clone();
    }
    worst
}

fn episode_loss(params: &ModelParams<f64>, image: ArrayView2<'_, f64>, label: usize) -> f64 {
    let trace = model::unroll(params, image, GLIMPSES).expect("valid instance");
    loss_fn(&trace, label).expect("valid label").total
}

#[derive(Default)]
struct Accumulator {
    blocks: BTreeMap<String, (f64, usize)>,
    order: Vec<String>,
}

impl Accumulator {
    fn record(&mut self, block: &str, err: f64) {
        if !self.blocks.contains_key(block) {
            self.order.push(block.to_string());
        }
        let slot = self.blocks.entry(block.to_string()).or_insert((0.0, 0));
        if err.is_nan() || err > slot.0 {
            slot.0 = if err.is_nan() { f64::INFINITY } else { err };
        }
        slot.1 += 1;
    }

    fn finish(self) -> Vec<BlockReport> {
        self.order
            .into_iter()
            .map(|b| {
                let (worst, entries) = self.blocks[&b];
                BlockReport {
                    block: b,
                    worst,
                    entries,
                }
            })
            .collect()
    }
}

fn check_model(inst: &mut Instance, cfg: &GradcheckConfig, acc: &mut Accumulator, nonzero_frozen: &mut usize) {
    let variant = inst.params.variant;
    let trace = model::unroll(&inst.params, inst.image.view(), GLIMPSES).expect("valid instance");
    let mut grads = model::model_backward(&inst.params, inst.image.view(), inst.label, &trace).expect("valid label");
    if cfg.fault == Fault::SigmaGradient {
        grads.lattice.log_sigma.mapv_inplace(|v| v * 1.01);
    }
    let analytic: Vec<(&'static str, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();

    for (block, (name, values)) in analytic.iter().enumerate() {
        if name.starts_with("lattice/") && !variant.learns_lattice() {
            *nonzero_frozen += values.iter().filter(|&&v| v != 0.0).count();
            continue;
        }
        let label = format!("{variant}/{name}");
        for (i, &a) in values.iter().enumerate() {
            let original = perturb(&mut inst.params, block, i, None);
            perturb(&mut inst.params, block, i, Some(original + cfg.step));
            let plus = episode_loss(&inst.params, inst.image.view(), inst.label);
            perturb(&mut inst.params, block, i, Some(original - cfg.step));
            let minus = episode_loss(&inst.params, inst.image.view(), inst.label);
            perturb(&mut inst.params, block, i, Some(original));
            let numeric = (plus - minus) / (2.0 * cfg.step);
            acc.record(&label, relative_error(a, numeric, cfg.floor));
        }
    }
}

/// Reads entry `i` of tensor `block`, optionally overwriting it first.
fn perturb(params: &mut ModelParams<f64>, block: usize, i: usize, value: Option<f64>) -> f64 {
    let mut tensors = params.tensors_mut();
    let t = &mut tensors[block].1;
    let slot = t.iter_mut().nth(i).expect("index in range");
    if let Some(v) = value {
        *slot = v;
    }
    *slot
}

fn check_glimpse<R: Rng>(rng: &mut R, cfg: &GradcheckConfig, acc: &mut Accumulator) {
    let mut image = random_image(rng);
    let mut lattice = random_lattice(rng);
    let side = IMAGE_SIDE as f64;
    let mut control = ControlState {
        center: [rng.random_range(0.0..side), rng.random_range(0.0..side)],
        zoom: rng.random_range(0.5..2.0),
    };
    let upstream: Vec<f64> = (0..KERNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut grads = glimpse::glimpse_backward(image.view(), &lattice, &control, &upstream).expect("valid instance");
    if cfg.fault == Fault::SigmaGradient {
        grads.d_log_sigma.mapv_inplace(|v| v * 1.01);
    }
    let objective = |image: &Array2<f64>, lattice: &Lattice<f64>, control: &ControlState<f64>| -> f64 {
        let g = glimpse::glimpse_forward(image.view(), lattice, control).expect("valid instance");
        g.values.iter().zip(&upstream).map(|(a, b)| a * b).sum()
    };
    let h = cfg.step;

    for (i, &a) in grads.d_image.iter().enumerate() {
        let original = image.as_slice().unwrap()[i];
        image.as_slice_mut().unwrap()[i] = original + h;
        let plus = objective(&image, &lattice, &control);
        image.as_slice_mut().unwrap()[i] = original - h;
        let minus = objective(&image, &lattice, &control);
        image.as_slice_mut().unwrap()[i] = original;
        acc.record("glimpse/image", relative_error(a, (plus - minus) / (2.0 * h), cfg.floor));
    }
    for ((k, axis), &a) in grads.d_mu.indexed_iter() {
        let original = lattice.mu[[k, axis]];
        lattice.mu[[k, axis]] = original + h;
        let plus = objective(&image, &lattice, &control);
        lattice.mu[[k, axis]] = original - h;
        let minus = objective(&image, &lattice, &control);
        lattice.mu[[k, axis]] = original;
        acc.record("glimpse/mu", relative_error(a, (plus - minus) / (2.0 * h), cfg.floor));
    }
    for (k, &a) in grads.d_log_sigma.iter().enumerate() {
        let original = lattice.log_sigma[k];
        lattice.log_sigma[k] = original + h;
        let plus = objective(&image, &lattice, &control);
        lattice.log_sigma[k] = original - h;
        let minus = objective(&image, &lattice, &control);
        lattice.log_sigma[k] = original;
        acc.record("glimpse/log_sigma", relative_error(a, (plus - minus) / (2.0 * h), cfg.floor));
    }
    for (axis, &a) in grads.d_center.iter().enumerate() {
        let original = control.center[axis];
        control.center[axis] = original + h;
        let plus = objective(&image, &lattice, &control);
        control.center[axis] = original - h;
        let minus = objective(&image, &lattice, &control);
        control.center[axis] = original;
        acc.record("glimpse/center", relative_error(a, (plus - minus) / (2.0 * h), cfg.floor));
    }
    let original = control.zoom;
    control.zoom = original + h;
    let plus = objective(&image, &lattice, &control);
    control.zoom = original - h;
    let minus = objective(&image, &lattice, &control);
    acc.record("glimpse/zoom", relative_error(grads.d_zoom, (plus - minus) / (2.0 * h), cfg.floor));
}

/// Runs `config.trials` trials. Each trial checks the glimpse operator and
/// one fresh instance of every model variant.
pub fn run_gradcheck(config: &GradcheckConfig) -> GradcheckReport {
    let mut acc = Accumulator::default();
    let mut redrawn = 0;
    let mut nonzero_frozen = 0;
    for trial in 0..config.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(trial as u64);
        check_glimpse(&mut rng, config, &mut acc);
        for variant in Variant::ALL {
            let mut inst = draw_instance(variant, &mut rng);
            let mut draws = 1;
            loop {
                let trace = model::unroll(&inst.params, inst.image.view(), GLIMPSES).expect("valid instance");
                if kink_distance(&inst.params, &trace) > KINK_MARGIN || draws >= MAX_REDRAWS {
                    break;
                }
                inst = draw_instance(variant, &mut rng);
                draws += 1;
                redrawn += 1;
            }
            check_model(&mut inst, config, &mut acc, &mut nonzero_frozen);
        }
    }
    GradcheckReport {
        config: config.clone(),
        blocks: acc.finish(),
        redrawn,
        nonzero_frozen,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let report = run_gradcheck(&GradcheckConfig {
            trials: 10,
            seed: 5,
            ..GradcheckConfig::default()
        });
        assert!(report.passed(), "{}", report.render());
        // glimpse blocks plus 10 tensors for fixed and 12 for each learned variant
        assert_eq!(report.blocks.len(), 5 + 10 + 12 + 12);
    }

    #[test]
    fn sigma_fault_is_caught_and_named() {
        let report = run_gradcheck(&GradcheckConfig {
            trials: 3,
            fault: Fault::SigmaGradient,
            ..GradcheckConfig::default()
        });
        assert!(!report.passed());
        let failed: Vec<&str> = report.failures().iter().map(|b| b.block.as_str()).collect();
        assert_eq!(
            failed,
            ["glimpse/log_sigma", "translate/lattice/log_sigma", "translate-zoom/lattice/log_sigma"]
        );
    }

    #[test]
    fn report_is_reproducible() {
        let cfg = GradcheckConfig {
            trials: 4,
            seed: 3,
            ..GradcheckConfig::default()
        };
        assert_eq!(run_gradcheck(&cfg), run_gradcheck(&cfg));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 1.0001, 1e-6) - 1e-4 / 1.0001).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
