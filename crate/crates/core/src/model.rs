//! Recurrent attention network.
//!
//! Per timestep: glimpse at the previous control state, two stacked ReLU
//! Elman layers, then an affine prediction head and an affine control head
//! reading the top layer. All passes run on batches (rows are examples);
//! the single-example API is the same code at batch size one.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::glimpse::{self, ControlState, GlimpseVector, Lattice, Window};
use crate::real::Real;

/// Control head outputs: `x`, `y`, raw zoom.
pub const CONTROL_OUTPUTS: usize = 3;

/// Raw zoom output is clamped to `[-ZOOM_LOG_LIMIT, ZOOM_LOG_LIMIT]` before `exp`.
pub const ZOOM_LOG_LIMIT: f64 = 2.0;

/// Weight scale applied on top of fan-in init for the two output heads so
/// initial logits stay close to uniform.
pub const HEAD_INIT_SCALE: f64 = 0.1;

/// Which parts of the retina the model may adapt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Lattice frozen at initialization, translation only.
    FixedLattice,
    /// Learnable lattice, translation only.
    TranslationOnly,
    /// Learnable lattice, translation and zoom.
    TranslationZoom,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::FixedLattice,
        Variant::TranslationOnly,
        Variant::TranslationZoom,
    ];

    pub fn learns_lattice(self) -> bool {
        !matches!(self, Variant::FixedLattice)
    }

    pub fn uses_zoom(self) -> bool {
        matches!(self, Variant::TranslationZoom)
    }

    pub fn code(self) -> u32 {
        match self {
            Variant::FixedLattice => 0,
            Variant::TranslationOnly => 1,
            Variant::TranslationZoom => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::FixedLattice => "fixed",
            Variant::TranslationOnly => "translate",
            Variant::TranslationZoom => "translate-zoom",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant `{s}` (expected one of: fixed, translate, translate-zoom)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub kernels: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelDims {
    /// 144 kernels, 512-unit layers, 10 classes.
    pub const FULL: ModelDims = ModelDims {
        kernels: 144,
        hidden: 512,
        classes: 10,
    };
}

/// Every trainable tensor of the model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub variant: Variant,
    pub window: Window,
    pub lattice: Lattice<F>,
    /// `hidden x kernels`
    pub w_in: Array2<F>,
    /// `hidden x hidden`
    pub w_rec1: Array2<F>,
    pub b1: Array1<F>,
    /// `hidden x hidden`
    pub w_12: Array2<F>,
    /// `hidden x hidden`
    pub w_rec2: Array2<F>,
    pub b2: Array1<F>,
    /// `3 x hidden`
    pub w_control: Array2<F>,
    pub b_control: Array1<F>,
    /// `classes x hidden`
    pub w_predict: Array2<F>,
    pub b_predict: Array1<F>,
}

/// Stable tensor names, in storage order.
pub const TENSOR_NAMES: [&str; 12] = [
    "lattice/mu",
    "lattice/log_sigma",
    "rnn/w_in",
    "rnn/w_rec1",
    "rnn/b1",
    "rnn/w_12",
    "rnn/w_rec2",
    "rnn/b2",
    "control/w",
    "control/b",
    "predict/w",
    "predict/b",
];

fn fan_in_uniform<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<F> {
    let bound = gain * (6.0 / cols as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || F::lit(rng.random_range(-bound..bound)))
}

impl<F: Real> ModelParams<F> {
    /// Fan-in uniform init (`+-sqrt(6 / fan_in)`), zero biases, heads scaled
    /// by [`HEAD_INIT_SCALE`].
    pub fn init<R: Rng + ?Sized>(
        dims: ModelDims,
        variant: Variant,
        window: Window,
        lattice: Lattice<F>,
        rng: &mut R,
    ) -> Result<Self> {
        if lattice.len() != dims.kernels {
            return Err(Error::invalid(format!(
                "lattice has {} kernels, dims ask for {}",
                lattice.len(),
                dims.kernels
            )));
        }
        let h = dims.hidden;
        Ok(Self {
            variant,
            window,
            lattice,
            w_in: fan_in_uniform(h, dims.kernels, 1.0, rng),
            w_rec1: fan_in_uniform(h, h, 1.0, rng),
            b1: Array1::zeros(h),
            w_12: fan_in_uniform(h, h, 1.0, rng),
            w_rec2: fan_in_uniform(h, h, 1.0, rng),
            b2: Array1::zeros(h),
            w_control: fan_in_uniform(CONTROL_OUTPUTS, h, HEAD_INIT_SCALE, rng),
            b_control: Array1::zeros(CONTROL_OUTPUTS),
            w_predict: fan_in_uniform(dims.classes, h, HEAD_INIT_SCALE, rng),
            b_predict: Array1::zeros(dims.classes),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            kernels: self.lattice.len(),
            hidden: self.b1.len(),
            classes: self.b_predict.len(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    pub fn tensors(&self) -> [(&'static str, ArrayViewD<'_, F>); 12] {
        let n = TENSOR_NAMES;
        [
            (n[0], self.lattice.mu.view().into_dyn()),
            (n[1], self.lattice.log_sigma.view().into_dyn()),
            (n[2], self.w_in.view().into_dyn()),
            (n[3], self.w_rec1.view().into_dyn()),
            (n[4], self.b1.view().into_dyn()),
            (n[5], self.w_12.view().into_dyn()),
            (n[6], self.w_rec2.view().into_dyn()),
            (n[7], self.b2.view().into_dyn()),
            (n[8], self.w_control.view().into_dyn()),
            (n[9], self.b_control.view().into_dyn()),
            (n[10], self.w_predict.view().into_dyn()),
            (n[11], self.b_predict.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, ArrayViewMutD<'_, F>); 12] {
        let n = TENSOR_NAMES;
        [
            (n[0], self.lattice.mu.view_mut().into_dyn()),
            (n[1], self.lattice.log_sigma.view_mut().into_dyn()),
            (n[2], self.w_in.view_mut().into_dyn()),
            (n[3], self.w_rec1.view_mut().into_dyn()),
            (n[4], self.b1.view_mut().into_dyn()),
            (n[5], self.w_12.view_mut().into_dyn()),
            (n[6], self.w_rec2.view_mut().into_dyn()),
            (n[7], self.b2.view_mut().into_dyn()),
            (n[8], self.w_control.view_mut().into_dyn()),
            (n[9], self.b_control.view_mut().into_dyn()),
            (n[10], self.w_predict.view_mut().into_dyn()),
            (n[11], self.b_predict.view_mut().into_dyn()),
        ]
    }

    /// Rebuilds parameters from named tensors (any order), checking shapes.
    pub fn from_tensors(
        variant: Variant,
        window: Window,
        mut lookup: impl FnMut(&str) -> Option<ArrayD<F>>,
    ) -> Result<Self> {
        let mut take2 = |name: &str| -> Result<Array2<F>> {
            lookup(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor `{name}`")))?
                .into_dimensionality()
                .map_err(|_| Error::invalid(format!("tensor `{name}` must be 2-D")))
        };
        let mu = take2(TENSOR_NAMES[0])?;
        let w_in = take2(TENSOR_NAMES[2])?;
        let w_rec1 = take2(TENSOR_NAMES[3])?;
        let w_12 = take2(TENSOR_NAMES[5])?;
        let w_rec2 = take2(TENSOR_NAMES[6])?;
        let w_control = take2(TENSOR_NAMES[8])?;
        let w_predict = take2(TENSOR_NAMES[10])?;
        let mut take1 = |name: &str| -> Result<Array1<F>> {
            lookup(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor `{name}`")))?
                .into_dimensionality()
                .map_err(|_| Error::invalid(format!("tensor `{name}` must be 1-D")))
        };
        let log_sigma = take1(TENSOR_NAMES[1])?;
        let b1 = take1(TENSOR_NAMES[4])?;
        let b2 = take1(TENSOR_NAMES[7])?;
        let b_control = take1(TENSOR_NAMES[9])?;
        let b_predict = take1(TENSOR_NAMES[11])?;
        let params = Self {
            variant,
            window,
            lattice: Lattice::new(mu, log_sigma)?,
            w_in,
            w_rec1,
            b1,
            w_12,
            w_rec2,
            b2,
            w_control,
            b_control,
            w_predict,
            b_predict,
        };
        params.check_shapes()?;
        Ok(params)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let d = self.dims();
        let expect = [
            ("rnn/w_in", self.w_in.dim(), (d.hidden, d.kernels)),
            ("rnn/w_rec1", self.w_rec1.dim(), (d.hidden, d.hidden)),
            ("rnn/w_12", self.w_12.dim(), (d.hidden, d.hidden)),
            ("rnn/w_rec2", self.w_rec2.dim(), (d.hidden, d.hidden)),
            ("control/w", self.w_control.dim(), (CONTROL_OUTPUTS, d.hidden)),
            ("predict/w", self.w_predict.dim(), (d.classes, d.hidden)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::invalid(format!(
                    "tensor `{name}` has shape {got:?}, expected {want:?}"
                )));
            }
        }
        if self.b2.len() != d.hidden || self.b_control.len() != CONTROL_OUTPUTS {
            return Err(Error::invalid("bias shapes do not match hidden size"));
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let c2 = |a: &Array2<F>| a.mapv(|v| G::lit(v.as_f64()));
        let c1 = |a: &Array1<F>| a.mapv(|v| G::lit(v.as_f64()));
        ModelParams {
            variant: self.variant,
            window: self.window,
            lattice: self.lattice.cast(),
            w_in: c2(&self.w_in),
            w_rec1: c2(&self.w_rec1),
            b1: c1(&self.b1),
            w_12: c2(&self.w_12),
            w_rec2: c2(&self.w_rec2),
            b2: c1(&self.b2),
            w_control: c2(&self.w_control),
            b_control: c1(&self.b_control),
            w_predict: c2(&self.w_predict),
            b_predict: c1(&self.b_predict),
        }
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, &b);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

/// Hidden activations of both recurrent layers.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnState<F> {
    pub h1: Array1<F>,
    pub h2: Array1<F>,
}

impl<F: Real> RnnState<F> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h1: Array1::zeros(hidden),
            h2: Array1::zeros(hidden),
        }
    }
}

/// One recorded timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep<F> {
    /// Control state the glimpse was taken at.
    pub control: ControlState<F>,
    pub glimpse: GlimpseVector<F>,
    pub state: RnnState<F>,
    pub logits: Array1<F>,
    pub predicted: usize,
    /// Raw control head output; drives the next step's control state.
    pub raw_control: [F; CONTROL_OUTPUTS],
}

/// Unrolled episode for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace<F> {
    pub steps: Vec<TraceStep<F>>,
}

impl<F: Real> Trace<F> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[inline]
fn relu<F: Real>(v: F) -> F {
    if v > F::zero() {
        v
    } else {
        F::zero()
    }
}

fn rnn_forward<F: Real>(
    params: &ModelParams<F>,
    glimpses: ArrayView2<'_, F>,
    h1_prev: ArrayView2<'_, F>,
    h2_prev: ArrayView2<'_, F>,
) -> (Array2<F>, Array2<F>) {
    let mut h1 = glimpses.dot(&params.w_in.t()) + h1_prev.dot(&params.w_rec1.t());
    h1 += &params.b1;
    h1.mapv_inplace(relu);
    let mut h2 = h1.dot(&params.w_12.t()) + h2_prev.dot(&params.w_rec2.t());
    h2 += &params.b2;
    h2.mapv_inplace(relu);
    (h1, h2)
}

fn affine<F: Real>(x: ArrayView2<'_, F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

/// Maps a raw control head output to a control state for an `height x width` image.
pub fn control_from_raw<F: Real>(
    raw: [F; CONTROL_OUTPUTS],
    variant: Variant,
    height: usize,
    width: usize,
) -> ControlState<F> {
    let half_w = F::lit(width as f64 / 2.0);
    let half_h = F::lit(height as f64 / 2.0);
    let zoom = if variant.uses_zoom() {
        let lim = F::lit(ZOOM_LOG_LIMIT);
        raw[2].max(-lim).min(lim).exp()
    } else {
        F::one()
    };
    ControlState {
        center: [half_w + half_w * raw[0].tanh(), half_h + half_h * raw[1].tanh()],
        zoom,
    }
}

fn check_state<F: Real>(params: &ModelParams<F>, state: &RnnState<F>) -> Result<()> {
    let h = params.dims().hidden;
    if state.h1.len() != h || state.h2.len() != h {
        return Err(Error::invalid(format!(
            "state has sizes ({}, {}), model hidden size is {h}",
            state.h1.len(),
            state.h2.len()
        )));
    }
    Ok(())
}

fn row<F: Real>(v: &Array1<F>) -> ArrayView2<'_, F> {
    v.view().insert_axis(Axis(0))
}

pub fn rnn_step<F: Real>(
    params: &ModelParams<F>,
    glimpse: &GlimpseVector<F>,
    prev: &RnnState<F>,
) -> Result<RnnState<F>> {
    if glimpse.values.len() != params.dims().kernels {
        return Err(Error::invalid(format!(
            "glimpse has {} features, model expects {}",
            glimpse.values.len(),
            params.dims().kernels
        )));
    }
    check_state(params, prev)?;
    let (h1, h2) = rnn_forward(params, row(&glimpse.values), row(&prev.h1), row(&prev.h2));
    Ok(RnnState {
        h1: h1.row(0).to_owned(),
        h2: h2.row(0).to_owned(),
    })
}

pub fn control_raw<F: Real>(params: &ModelParams<F>, state: &RnnState<F>) -> [F; CONTROL_OUTPUTS] {
    let raw = affine(row(&state.h2), &params.w_control, &params.b_control);
    [raw[[0, 0]], raw[[0, 1]], raw[[0, 2]]]
}

pub fn control_step<F: Real>(
    params: &ModelParams<F>,
    state: &RnnState<F>,
    height: usize,
    width: usize,
) -> ControlState<F> {
    control_from_raw(control_raw(params, state), params.variant, height, width)
}

/// Class logits read from the top recurrent layer.
pub fn predict<F: Real>(params: &ModelParams<F>, state: &RnnState<F>) -> Array1<F> {
    affine(row(&state.h2), &params.w_predict, &params.b_predict)
        .row(0)
        .to_owned()
}

pub(crate) fn argmax<F: Real>(v: impl IntoIterator<Item = F>) -> usize {
    let mut best = 0;
    let mut best_v = F::neg_infinity();
    for (i, x) in v.into_iter().enumerate() {
        if x > best_v {
            best = i;
            best_v = x;
        }
    }
    best
}

/// Runs `steps` glimpses over one image starting at the image center.
pub fn unroll<F: Real>(params: &ModelParams<F>, image: ArrayView2<'_, F>, steps: usize) -> Result<Trace<F>> {
    if steps == 0 {
        return Err(Error::invalid("need at least one glimpse"));
    }
    let (height, width) = image.dim();
    let mut control = ControlState::centered(height, width);
    let mut state = RnnState::zeros(params.dims().hidden);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let glimpse = glimpse::glimpse_forward_windowed(image, &params.lattice, &control, params.window)?;
        state = rnn_step(params, &glimpse, &state)?;
        let logits = predict(params, &state);
        let raw_control = control_raw(params, &state);
        let next = control_from_raw(raw_control, params.variant, height, width);
        out.push(TraceStep {
            control,
            glimpse,
            state: state.clone(),
            predicted: argmax(logits.iter().copied()),
            logits,
            raw_control,
        });
        control = next;
    }
    Ok(Trace { steps: out })
}

/// Batched record of one timestep; rows are examples.
#[derive(Clone, Debug)]
pub struct BatchStep<F> {
    pub controls: Vec<ControlState<F>>,
    pub glimpses: Array2<F>,
    pub h1: Array2<F>,
    pub h2: Array2<F>,
    pub logits: Array2<F>,
    pub raw_control: Array2<F>,
}

#[derive(Clone, Debug)]
pub struct BatchTrace<F> {
    pub steps: Vec<BatchStep<F>>,
}

/// Batched [`unroll`] over `images` (`batch x height x width`).
pub fn unroll_batch<F: Real>(params: &ModelParams<F>, images: ArrayView3<'_, F>, steps: usize) -> BatchTrace<F> {
    let (batch, height, width) = images.dim();
    let dims = params.dims();
    let mut controls = vec![ControlState::centered(height, width); batch];
    let mut h1 = Array2::zeros((batch, dims.hidden));
    let mut h2 = Array2::zeros((batch, dims.hidden));
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut glimpses = Array2::zeros((batch, dims.kernels));
        for (e, mut g) in glimpses.outer_iter_mut().enumerate() {
            glimpse::sample_into(
                images.index_axis(Axis(0), e),
                &params.lattice,
                &controls[e],
                params.window,
                g.as_slice_mut().expect("contiguous"),
            );
        }
        let (n1, n2) = rnn_forward(params, glimpses.view(), h1.view(), h2.view());
        h1 = n1;
        h2 = n2;
        let logits = affine(h2.view(), &params.w_predict, &params.b_predict);
        let raw_control = affine(h2.view(), &params.w_control, &params.b_control);
        let next: Vec<_> = raw_control
            .outer_iter()
            .map(|r| control_from_raw([r[0], r[1], r[2]], params.variant, height, width))
            .collect();
        out.push(BatchStep {
            controls: std::mem::replace(&mut controls, next),
            glimpses,
            h1: h1.clone(),
            h2: h2.clone(),
            logits,
            raw_control,
        });
    }
    BatchTrace { steps: out }
}

/// Row-wise `softmax(logits) - onehot(label)`: gradient of the negative
/// log-likelihood with respect to the logits.
pub(crate) fn nll_logit_grad<F: Real>(logits: ArrayView2<'_, F>, labels: &[usize]) -> Array2<F> {
    let mut out = logits.to_owned();
    for (mut r, &label) in out.outer_iter_mut().zip(labels) {
        let peak = r.iter().copied().fold(F::neg_infinity(), F::max);
        r.mapv_inplace(|v| (v - peak).exp());
        let total: F = r.sum();
        r.mapv_inplace(|v| v / total);
        r[label] = r[label] - F::one();
    }
    out
}

fn accumulate_outer<F: Real>(dst: &mut Array2<F>, delta: &Array2<F>, input: ArrayView2<'_, F>) {
    ndarray::linalg::general_mat_mul(F::one(), &delta.t(), &input, F::one(), dst);
}

/// Gradient of `scale * sum_examples sum_t NLL_t` with respect to every
/// parameter, by backpropagation through time. Gradient flows through the
/// control head into later glimpses. Lattice gradients are zero for
/// [`Variant::FixedLattice`].
pub fn backward_batch<F: Real>(
    params: &ModelParams<F>,
    images: ArrayView3<'_, F>,
    labels: &[usize],
    trace: &BatchTrace<F>,
    scale: F,
) -> ModelParams<F> {
    let (batch, height, width) = images.dim();
    let dims = params.dims();
    let steps = trace.steps.len();
    let mut grads = params.zeros_like();
    let mut d_pre1_next = Array2::<F>::zeros((batch, dims.hidden));
    let mut d_pre2_next = Array2::<F>::zeros((batch, dims.hidden));
    // Gradient with respect to the control state produced at step t
    // (consumed by the glimpse at step t + 1).
    let mut d_control_next = vec![([F::zero(); 2], F::zero()); batch];
    let half_w = F::lit(width as f64 / 2.0);
    let half_h = F::lit(height as f64 / 2.0);
    let lim = F::lit(ZOOM_LOG_LIMIT);

    for t in (0..steps).rev() {
        let step = &trace.steps[t];
        let mut d_logits = nll_logit_grad(step.logits.view(), labels);
        d_logits.mapv_inplace(|v| v * scale);

        let mut d_raw = Array2::<F>::zeros((batch, CONTROL_OUTPUTS));
        if t + 1 < steps {
            for (e, mut r) in d_raw.outer_iter_mut().enumerate() {
                let ([dcx, dcy], dz) = d_control_next[e];
                let raw = step.raw_control.row(e);
                let tx = raw[0].tanh();
                let ty = raw[1].tanh();
                r[0] = dcx * half_w * (F::one() - tx * tx);
                r[1] = dcy * half_h * (F::one() - ty * ty);
                if params.variant.uses_zoom() && raw[2] > -lim && raw[2] < lim {
                    r[2] = dz * raw[2].exp();
                }
            }
        }

        let mut d_h2 = d_logits.dot(&params.w_predict) + d_raw.dot(&params.w_control);
        ndarray::linalg::general_mat_mul(F::one(), &d_pre2_next, &params.w_rec2, F::one(), &mut d_h2);
        Zip::from(&mut d_h2).and(&step.h2).for_each(|d, &h| {
            if h <= F::zero() {
                *d = F::zero();
            }
        });
        let d_pre2 = d_h2;

        accumulate_outer(&mut grads.w_predict, &d_logits, step.h2.view());
        grads.b_predict += &d_logits.sum_axis(Axis(0));
        accumulate_outer(&mut grads.w_control, &d_raw, step.h2.view());
        grads.b_control += &d_raw.sum_axis(Axis(0));
        accumulate_outer(&mut grads.w_12, &d_pre2, step.h1.view());
        if t > 0 {
            accumulate_outer(&mut grads.w_rec2, &d_pre2, trace.steps[t - 1].h2.view());
        }
        grads.b2 += &d_pre2.sum_axis(Axis(0));

        let mut d_h1 = d_pre2.dot(&params.w_12);
        ndarray::linalg::general_mat_mul(F::one(), &d_pre1_next, &params.w_rec1, F::one(), &mut d_h1);
        Zip::from(&mut d_h1).and(&step.h1).for_each(|d, &h| {
            if h <= F::zero() {
                *d = F::zero();
            }
        });
        let d_pre1 = d_h1;

        accumulate_outer(&mut grads.w_in, &d_pre1, step.glimpses.view());
        if t > 0 {
            accumulate_outer(&mut grads.w_rec1, &d_pre1, trace.steps[t - 1].h1.view());
        }
        grads.b1 += &d_pre1.sum_axis(Axis(0));

        let d_glimpse = d_pre1.dot(&params.w_in);
        for e in 0..batch {
            let (dc, dz) = glimpse::sample_backward(
                images.index_axis(Axis(0), e),
                &params.lattice,
                &step.controls[e],
                params.window,
                d_glimpse.row(e).as_slice().expect("contiguous"),
                grads.lattice.mu.view_mut(),
                grads.lattice.log_sigma.as_slice_mut().expect("contiguous"),
                None,
            );
            d_control_next[e] = (dc, dz);
        }

        d_pre1_next = d_pre1;
        d_pre2_next = d_pre2;
    }

    if !params.variant.learns_lattice() {
        grads.lattice.mu.fill(F::zero());
        grads.lattice.log_sigma.fill(F::zero());
    }
    grads
}

/// Gradient of the summed per-timestep negative log-likelihood of one
/// example, given the trace [`unroll`] produced for it.
pub fn model_backward<F: Real>(
    params: &ModelParams<F>,
    image: ArrayView2<'_, F>,
    label: usize,
    trace: &Trace<F>,
) -> Result<ModelParams<F>> {
    let dims = params.dims();
    if label >= dims.classes {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let stack = |f: &dyn Fn(&TraceStep<F>) -> ArrayView2<'_, F>| -> Vec<Array2<F>> {
        trace.steps.iter().map(|s| f(s).to_owned()).collect()
    };
    let glimpses = stack(&|s| row(&s.glimpse.values));
    let h1 = stack(&|s| row(&s.state.h1));
    let h2 = stack(&|s| row(&s.state.h2));
    let logits = stack(&|s| row(&s.logits));
    let batch_trace = BatchTrace {
        steps: trace
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| BatchStep {
                controls: vec![s.control],
                glimpses: glimpses[t].clone(),
                h1: h1[t].clone(),
                h2: h2[t].clone(),
                logits: logits[t].clone(),
                raw_control: Array2::from_shape_vec((1, CONTROL_OUTPUTS), s.raw_control.to_vec())
                    .expect("shape"),
            })
            .collect(),
    };
    let images = image.insert_axis(Axis(0));
    Ok(backward_batch(params, images, &[label], &batch_trace, F::one()))
}

/// Predicted class per timestep for every row of a batch trace.
pub fn batch_predictions<F: Real>(trace: &BatchTrace<F>) -> Vec<Vec<usize>> {
    trace
        .steps
        .iter()
        .map(|s| s.logits.outer_iter().map(|r| argmax(r.iter().copied())).collect())
        .collect()
}

/// Slice of a batch trace for a single example.
pub fn trace_row<F: Real>(trace: &BatchTrace<F>, e: usize, height: usize, width: usize) -> Trace<F> {
    Trace {
        steps: trace
            .steps
            .iter()
            .map(|s| {
                let logits = s.logits.row(e).to_owned();
                TraceStep {
                    control: s.controls[e],
                    glimpse: GlimpseVector {
                        values: s.glimpses.row(e).to_owned(),
                        height,
                        width,
                    },
                    state: RnnState {
                        h1: s.h1.row(e).to_owned(),
                        h2: s.h2.row(e).to_owned(),
                    },
                    predicted: argmax(logits.iter().copied()),
                    logits,
                    raw_control: [s.raw_control[[e, 0]], s.raw_control[[e, 1]], s.raw_control[[e, 2]]],
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glimpse::init_lattice;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant, seed: u64) -> ModelParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            kernels: 9,
            hidden: 6,
            classes: 10,
        };
        let mut p =
            ModelParams::init(dims, variant, Window::Full, init_lattice(3, 6.0, 1.5).unwrap(), &mut rng).unwrap();
        for (name, mut t) in p.tensors_mut() {
            if !name.starts_with("lattice/") {
                t.mapv_inplace(|_| rng.random_range(-0.7..0.7));
            }
        }
        p
    }

    fn image(seed: u64, side: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((side, side), || rng.random_range(0.0..1.0))
    }

    #[test]
    fn control_head_examples() {
        let c = control_from_raw([0.0f64, 0.0, 0.0], Variant::TranslationZoom, 100, 100);
        assert_eq!(c.center, [50.0, 50.0]);
        assert_eq!(c.zoom, 1.0);
        let c = control_from_raw([50.0f64, 50.0, 0.0], Variant::TranslationOnly, 100, 100);
        assert_eq!(c.center, [100.0, 100.0]);
        let c = control_from_raw([0.3f64, -0.2, 1.7], Variant::TranslationOnly, 100, 100);
        assert_eq!(c.zoom, 1.0);
        let c = control_from_raw([0.0f64, 0.0, 9.0], Variant::TranslationZoom, 100, 100);
        assert_eq!(c.zoom, 2f64.exp());
        let c = control_from_raw([0.0f64, 0.0, -9.0], Variant::TranslationZoom, 100, 100);
        assert_eq!(c.zoom, (-2f64).exp());
    }

    #[test]
    fn rnn_step_zero_weights() {
        let mut p = small(Variant::TranslationOnly, 1);
        for (_, mut t) in p.tensors_mut().into_iter().skip(2) {
            t.fill(0.0);
        }
        let g = GlimpseVector {
            values: Array1::from_elem(9, 0.7),
            height: 8,
            width: 8,
        };
        let prev = RnnState {
            h1: Array1::from_elem(6, 2.0),
            h2: Array1::from_elem(6, 3.0),
        };
        let s = rnn_step(&p, &g, &prev).unwrap();
        assert!(s.h1.iter().chain(s.h2.iter()).all(|&v| v == 0.0));
        assert!(predict(&p, &s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rnn_step_scalar_instance() {
        let lattice = Lattice::new(array![[0.0, 0.0]], array![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = ModelDims {
            kernels: 1,
            hidden: 1,
            classes: 10,
        };
        let mut p = ModelParams::init(dims, Variant::TranslationOnly, Window::Full, lattice, &mut rng).unwrap();
        p.w_in.fill(1.0);
        p.w_rec1.fill(1.0);
        let g = GlimpseVector {
            values: array![2.0],
            height: 1,
            width: 1,
        };
        let prev = RnnState {
            h1: array![3.0],
            h2: array![0.0],
        };
        assert_eq!(rnn_step(&p, &g, &prev).unwrap().h1[0], 5.0);
    }

    #[test]
    fn rnn_step_matches_dense_loops() {
        let p = small(Variant::TranslationZoom, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GlimpseVector {
            values: Array1::from_shape_simple_fn(9, || rng.random_range(0.0..1.0)),
            height: 8,
            width: 8,
        };
        let prev = RnnState {
            h1: Array1::from_shape_simple_fn(6, || rng.random_range(0.0..1.0)),
            h2: Array1::from_shape_simple_fn(6, || rng.random_range(0.0..1.0)),
        };
        let s = rnn_step(&p, &g, &prev).unwrap();
        let logits = predict(&p, &s);
        let mut h1 = [0.0f64; 6];
        for (j, h) in h1.iter_mut().enumerate() {
            let mut acc = p.b1[j];
            for k in 0..9 {
                acc += p.w_in[[j, k]] * g.values[k];
            }
            for k in 0..6 {
                acc += p.w_rec1[[j, k]] * prev.h1[k];
            }
            *h = acc.max(0.0);
        }
        let mut h2 = [0.0f64; 6];
        for (j, h) in h2.iter_mut().enumerate() {
            let mut acc = p.b2[j];
            for k in 0..6 {
                acc += p.w_12[[j, k]] * h1[k] + p.w_rec2[[j, k]] * prev.h2[k];
            }
            *h = acc.max(0.0);
        }
        for j in 0..6 {
            assert!((s.h1[j] - h1[j]).abs() < 1e-12);
            assert!((s.h2[j] - h2[j]).abs() < 1e-12);
        }
        for c in 0..10 {
            let mut acc = p.b_predict[c];
            for k in 0..6 {
                acc += p.w_predict[[c, k]] * h2[k];
            }
            assert!((logits[c] - acc).abs() < 1e-12);
        }
        assert!(rnn_step(&p, &GlimpseVector { values: Array1::zeros(3), height: 8, width: 8 }, &prev).is_err());
    }

    #[test]
    fn single_glimpse_is_centered() {
        let p = small(Variant::TranslationZoom, 4);
        let img = image(5, 12);
        let tr = unroll(&p, img.view(), 1).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr.steps[0].control, ControlState::centered(12, 12));
        assert!(unroll(&p, img.view(), 0).is_err());
    }

    #[test]
    fn zero_weights_pin_control() {
        let mut p = small(Variant::TranslationZoom, 6);
        for (_, mut t) in p.tensors_mut().into_iter().skip(2) {
            t.fill(0.0);
        }
        let img = image(7, 12);
        let tr = unroll(&p, img.view(), 4).unwrap();
        for s in &tr.steps {
            assert_eq!(s.control, ControlState::centered(12, 12));
            assert_eq!(s.glimpse, tr.steps[0].glimpse);
            assert!(s.logits.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn replay_reproduces_each_step() {
        for variant in Variant::ALL {
            let p = small(variant, 8);
            let img = image(9, 12);
            let tr = unroll(&p, img.view(), 4).unwrap();
            let mut prev = RnnState::zeros(6);
            let mut control = ControlState::centered(12, 12);
            for s in &tr.steps {
                assert_eq!(s.control, control);
                let g = glimpse::glimpse_forward(img.view(), &p.lattice, &control).unwrap();
                assert_eq!(g, s.glimpse);
                let state = rnn_step(&p, &g, &prev).unwrap();
                assert_eq!(state, s.state);
                assert_eq!(predict(&p, &state), s.logits);
                control = control_step(&p, &state, 12, 12);
                prev = state;
                assert!(s.state.h1.iter().chain(s.state.h2.iter()).all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn batch_rows_match_single_unroll() {
        let p = small(Variant::TranslationZoom, 10);
        let imgs = Array3::from_shape_fn((3, 12, 12), |(e, y, x)| ((e * 31 + y * 7 + x * 3) % 17) as f64 / 16.0);
        let bt = unroll_batch(&p, imgs.view(), 3);
        for e in 0..3 {
            let single = unroll(&p, imgs.index_axis(Axis(0), e), 3).unwrap();
            let row = trace_row(&bt, e, 12, 12);
            for (a, b) in single.steps.iter().zip(&row.steps) {
                assert_eq!(a.predicted, b.predicted);
                for (x, y) in a.logits.iter().zip(&b.logits) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn capability_masks_in_gradients() {
        let img = image(11, 12);
        let p = small(Variant::FixedLattice, 12);
        let tr = unroll(&p, img.view(), 3).unwrap();
        let g = model_backward(&p, img.view(), 4, &tr).unwrap();
        assert!(g.lattice.mu.iter().chain(g.lattice.log_sigma.iter()).all(|&v| v == 0.0));
        assert!(g.w_in.iter().any(|&v| v != 0.0));

        let p = small(Variant::TranslationOnly, 12);
        let tr = unroll(&p, img.view(), 3).unwrap();
        let g = model_backward(&p, img.view(), 4, &tr).unwrap();
        assert!(g.w_control.row(2).iter().all(|&v| v == 0.0));
        assert_eq!(g.b_control[2], 0.0);
        assert!(g.lattice.mu.iter().any(|&v| v != 0.0));
        assert!(tr.steps.iter().all(|s| s.control.zoom == 1.0));
        assert!(model_backward(&p, img.view(), 10, &tr).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let p = small(Variant::TranslationZoom, 13);
        let img = image(14, 12);
        let tr = unroll(&p, img.view(), 4).unwrap();
        let a = model_backward(&p, img.view(), 2, &tr).unwrap();
        let b = model_backward(&p, img.view(), 2, &tr).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_code(v.code()), Some(v));
        }
        let err = "zoom".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("fixed, translate, translate-zoom"));
    }

    #[test]
    fn checkpoint_tensor_round_trip() {
        let p = small(Variant::TranslationOnly, 15);
        let map: std::collections::HashMap<&str, ArrayD<f64>> =
            p.tensors().into_iter().map(|(n, t)| (n, t.to_owned())).collect();
        let back = ModelParams::from_tensors(p.variant, p.window, |n| map.get(n).cloned()).unwrap();
        assert_eq!(back, p);
        let err = ModelParams::<f64>::from_tensors(p.variant, p.window, |n| {
            if n == "rnn/b2" {
                None
            } else {
                map.get(n).cloned()
            }
        })
        .unwrap_err();
        assert!(err.to_string().contains("rnn/b2"));
    }
}
