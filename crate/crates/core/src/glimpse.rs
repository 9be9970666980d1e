//! Differentiable retinal sampler.
//!
//! Each of the `K` kernels is an isotropic Gaussian factored into a horizontal
//! and a vertical component. The glimpse feature for kernel `i` is the
//! weighted sum of image pixels under that kernel. The control state moves the
//! whole lattice (`center`) and rescales it about its own center (`zoom`):
//!
//! ```text
//! center_i = s_c + s_z * mu_i
//! width_i  = s_z * exp(log_sigma_i)
//! ```
//!
//! Every 1-D factor is evaluated at integer pixel coordinates and normalized
//! over the pixels it covers, so each kernel's weights sum to one and a glimpse
//! value is always a convex combination of pixels.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};
use crate::real::Real;

/// Learnable kernel offsets and widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice<F> {
    /// `K x 2` offsets `(x, y)` in pixels, relative to the glimpse center.
    pub mu: Array2<F>,
    /// Natural log of each kernel's standard deviation in pixels.
    pub log_sigma: Array1<F>,
}

impl<F: Real> Lattice<F> {
    pub fn new(mu: Array2<F>, log_sigma: Array1<F>) -> Result<Self> {
        if mu.ncols() != 2 {
            return Err(Error::invalid(format!(
                "lattice offsets must be K x 2, got {:?}",
                mu.shape()
            )));
        }
        if mu.nrows() == 0 {
            return Err(Error::invalid("lattice needs at least one kernel"));
        }
        if mu.nrows() != log_sigma.len() {
            return Err(Error::invalid(format!(
                "lattice has {} offsets but {} widths",
                mu.nrows(),
                log_sigma.len()
            )));
        }
        if !mu.iter().chain(log_sigma.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("lattice contains non-finite values"));
        }
        Ok(Self { mu, log_sigma })
    }

    pub fn len(&self) -> usize {
        self.log_sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_sigma.is_empty()
    }

    pub fn offset(&self, i: usize) -> [F; 2] {
        [self.mu[[i, 0]], self.mu[[i, 1]]]
    }

    pub fn sigma(&self, i: usize) -> F {
        self.log_sigma[i].exp()
    }

    pub fn sigmas(&self) -> Array1<F> {
        self.log_sigma.mapv(F::exp)
    }

    pub fn cast<G: Real>(&self) -> Lattice<G> {
        Lattice {
            mu: self.mu.mapv(|v| G::lit(v.as_f64())),
            log_sigma: self.log_sigma.mapv(|v| G::lit(v.as_f64())),
        }
    }
}

/// Builds a `grid_side x grid_side` lattice centered on the origin.
///
/// Offsets are laid out row-major (`i = row * grid_side + col`) and span
/// `span` pixels per axis; every kernel starts with width `sigma0`.
pub fn init_lattice<F: Real>(grid_side: usize, span: F, sigma0: F) -> Result<Lattice<F>> {
    if grid_side == 0 {
        return Err(Error::invalid("grid_side must be at least 1"));
    }
    if !(span > F::zero()) || !(sigma0 > F::zero()) {
        return Err(Error::invalid("span and sigma0 must be positive"));
    }
    let k = grid_side * grid_side;
    let coord = |j: usize| -> F {
        if grid_side == 1 {
            F::zero()
        } else {
            let half = span / F::lit(2.0);
            -half + span * F::lit(j as f64) / F::lit((grid_side - 1) as f64)
        }
    };
    let mut mu = Array2::zeros((k, 2));
    for row in 0..grid_side {
        for col in 0..grid_side {
            let i = row * grid_side + col;
            mu[[i, 0]] = coord(col);
            mu[[i, 1]] = coord(row);
        }
    }
    let log_sigma = Array1::from_elem(k, sigma0.ln());
    Lattice::new(mu, log_sigma)
}

/// Per-timestep glimpse placement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlState<F> {
    /// Glimpse center `(x, y)` in image pixel coordinates.
    pub center: [F; 2],
    /// Dimensionless zoom; strictly positive.
    pub zoom: F,
}

impl<F: Real> ControlState<F> {
    pub fn new(center: [F; 2], zoom: F) -> Result<Self> {
        let c = Self { center, zoom };
        c.validate()?;
        Ok(c)
    }

    /// Image center at unit zoom; where the first glimpse looks.
    pub fn centered(height: usize, width: usize) -> Self {
        Self {
            center: [
                F::lit(width as f64 / 2.0),
                F::lit(height as f64 / 2.0),
            ],
            zoom: F::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("control center must be finite"));
        }
        if !(self.zoom.is_finite() && self.zoom > F::zero()) {
            return Err(Error::invalid(format!(
                "zoom must be finite and positive, got {}",
                self.zoom
            )));
        }
        Ok(())
    }
}

/// Kernel centers and widths in image pixels for one control state.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveKernels<F> {
    pub centers: Vec<[F; 2]>,
    pub sigmas: Vec<F>,
}

pub fn effective_kernels<F: Real>(
    lattice: &Lattice<F>,
    control: &ControlState<F>,
) -> Result<EffectiveKernels<F>> {
    control.validate()?;
    if !lattice
        .mu
        .iter()
        .chain(lattice.log_sigma.iter())
        .all(|v| v.is_finite())
    {
        return Err(Error::invalid("lattice contains non-finite values"));
    }
    let k = lattice.len();
    let mut centers = Vec::with_capacity(k);
    let mut sigmas = Vec::with_capacity(k);
    for i in 0..k {
        centers.push(kernel_center(lattice, control, i));
        sigmas.push(control.zoom * lattice.sigma(i));
    }
    Ok(EffectiveKernels { centers, sigmas })
}

#[inline]
fn kernel_center<F: Real>(lattice: &Lattice<F>, control: &ControlState<F>, i: usize) -> [F; 2] {
    [
        control.center[0] + control.zoom * lattice.mu[[i, 0]],
        control.center[1] + control.zoom * lattice.mu[[i, 1]],
    ]
}

/// Pixel support used for each 1-D kernel factor.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Window {
    /// Every pixel on the axis.
    #[default]
    Full,
    /// Pixels within `n` effective standard deviations of the center.
    /// Normalization runs over the same support.
    Sigmas(f64),
}

impl Window {
    /// Encoding used in checkpoints: `0` means [`Window::Full`].
    pub fn as_scalar(self) -> f64 {
        match self {
            Window::Full => 0.0,
            Window::Sigmas(n) => n,
        }
    }

    pub fn from_scalar(v: f64) -> Self {
        if v > 0.0 {
            Window::Sigmas(v)
        } else {
            Window::Full
        }
    }
}

/// Normalized 1-D Gaussian weights over `start..start + w.len()`.
struct AxisWeights<F> {
    start: usize,
    center: F,
    w: Vec<F>,
}

fn axis_support<F: Real>(center: F, sigma: F, len: usize, window: Window) -> (usize, usize) {
    let last = len - 1;
    match window {
        Window::Full => (0, last),
        Window::Sigmas(n) => {
            let c = center.as_f64();
            let r = n * sigma.as_f64();
            let lo = (c - r).ceil();
            let hi = (c + r).floor();
            if lo > hi || hi < 0.0 || lo > last as f64 {
                let nearest = c.round().clamp(0.0, last as f64) as usize;
                return (nearest, nearest);
            }
            (lo.max(0.0) as usize, hi.min(last as f64) as usize)
        }
    }
}

/// Softmax of the log-density `-(p - c)^2 / 2s^2` over the support.
///
/// The weights are built outward from the support pixel nearest the center
/// (the maximum, fixed at 1 before normalization) with the exact ratio
/// recurrence `w(p + 1) / w(p) = exp(-(2(p - c) + 1) / 2s^2)`. Every factor
/// is at most 1, so kernels far off the image stay finite. Tail weights
/// below `eps^2` of the peak are set to zero, which keeps every product in
/// the normal floating-point range.
fn axis_weights<F: Real>(center: F, sigma: F, len: usize, window: Window) -> AxisWeights<F> {
    let (lo, hi) = axis_support(center, sigma, len, window);
    let a = F::one() / (F::lit(2.0) * sigma * sigma);
    let two = F::lit(2.0);
    let peak = center.round().max(F::lit(lo as f64)).min(F::lit(hi as f64));
    let p0 = peak.as_f64() as usize;
    let step = (-two * a).exp();
    let tiny = F::epsilon() * F::epsilon();
    let mut w = vec![F::zero(); hi - lo + 1];
    w[p0 - lo] = F::one();
    let offset = peak - center;
    let mut ratio = (-a * (two * offset + F::one())).exp();
    let mut v = F::one();
    for slot in &mut w[p0 - lo + 1..] {
        v = v * ratio;
        if v < tiny {
            break;
        }
        ratio = ratio * step;
        *slot = v;
    }
    let mut ratio = (a * (two * offset - F::one())).exp();
    let mut v = F::one();
    for slot in w[..p0 - lo].iter_mut().rev() {
        v = v * ratio;
        if v < tiny {
            break;
        }
        ratio = ratio * step;
        *slot = v;
    }
    let total: F = w.iter().copied().sum();
    let inv = F::one() / total;
    for x in &mut w {
        *x = *x * inv;
    }
    AxisWeights { start: lo, center, w }
}

impl<F: Real> AxisWeights<F> {
    /// Returns `(d/dcenter, d/dsigma)` given `dL/dw` for each weight.
    fn backward(&self, grad_w: &[F], sigma: F) -> (F, F) {
        let mean: F = self.w.iter().zip(grad_w).map(|(&w, &g)| w * g).sum();
        let inv_var = F::one() / (sigma * sigma);
        let mut d_center = F::zero();
        let mut d_sigma = F::zero();
        let mut d = F::lit(self.start as f64) - self.center;
        for (&w, &g) in self.w.iter().zip(grad_w) {
            let da = w * (g - mean);
            d_center = d_center + da * d;
            d_sigma = d_sigma + da * d * d;
            d = d + F::one();
        }
        (d_center * inv_var, d_sigma * inv_var / sigma)
    }
}

/// Weight plane `w[n, m]` of one kernel over an `height x width` image.
pub fn kernel_weights<F: Real>(
    center: [F; 2],
    sigma: F,
    height: usize,
    width: usize,
) -> Result<Array2<F>> {
    if !(sigma > F::zero() && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("image dimensions must be at least 1"));
    }
    if !center.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("kernel center must be finite"));
    }
    let ax = axis_weights(center[0], sigma, width, Window::Full);
    let ay = axis_weights(center[1], sigma, height, Window::Full);
    Ok(Array2::from_shape_fn((height, width), |(n, m)| {
        ay.w[n] * ax.w[m]
    }))
}

/// One glimpse: `K` sampled features plus the dimensions of the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseVector<F> {
    pub values: Array1<F>,
    pub height: usize,
    pub width: usize,
}

fn check_image<F: Real>(image: &ArrayView2<'_, F>) -> Result<()> {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("image must be at least 1x1"));
    }
    Ok(())
}

pub fn glimpse_forward<F: Real>(
    image: ArrayView2<'_, F>,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
) -> Result<GlimpseVector<F>> {
    glimpse_forward_windowed(image, lattice, control, Window::Full)
}

pub fn glimpse_forward_windowed<F: Real>(
    image: ArrayView2<'_, F>,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
    window: Window,
) -> Result<GlimpseVector<F>> {
    check_image(&image)?;
    control.validate()?;
    let (height, width) = image.dim();
    let mut values = Array1::zeros(lattice.len());
    sample_into(
        image,
        lattice,
        control,
        window,
        values.as_slice_mut().expect("contiguous"),
    );
    Ok(GlimpseVector {
        values,
        height,
        width,
    })
}

/// Unchecked forward pass writing `K` features into `out`.
pub(crate) fn sample_into<F: Real>(
    image: ArrayView2<'_, F>,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
    window: Window,
    out: &mut [F],
) {
    let (height, width) = image.dim();
    if window == Window::Full {
        let (ax, ay) = full_axes(lattice, control, height, width);
        // A[n, k] = sum_m U[n, m] wx_k[m]
        let a = image.dot(&weight_matrix(&ax, width).t());
        for (k, g) in out.iter_mut().enumerate() {
            *g = ay[k].w.iter().zip(a.column(k)).map(|(&wy, &r)| wy * r).sum();
        }
        return;
    }
    let image = image.as_standard_layout();
    let pixels = image.as_slice().expect("standard layout");
    for (i, g) in out.iter_mut().enumerate() {
        let [cx, cy] = kernel_center(lattice, control, i);
        let s = control.zoom * lattice.sigma(i);
        let ax = axis_weights(cx, s, width, window);
        let ay = axis_weights(cy, s, height, window);
        let mut acc = F::zero();
        for (dn, &wy) in ay.w.iter().enumerate() {
            let row = &pixels[(ay.start + dn) * width + ax.start..][..ax.w.len()];
            let r: F = row.iter().zip(&ax.w).map(|(&u, &wx)| u * wx).sum();
            acc = acc + wy * r;
        }
        *g = acc;
    }
}

type AxisPair<F> = (Vec<AxisWeights<F>>, Vec<AxisWeights<F>>);

/// Full-support axis weights of every kernel.
fn full_axes<F: Real>(lattice: &Lattice<F>, control: &ControlState<F>, height: usize, width: usize) -> AxisPair<F> {
    (0..lattice.len())
        .map(|i| {
            let [cx, cy] = kernel_center(lattice, control, i);
            let s = control.zoom * lattice.sigma(i);
            (
                axis_weights(cx, s, width, Window::Full),
                axis_weights(cy, s, height, Window::Full),
            )
        })
        .unzip()
}

/// Stacks full-support weights into a `K x len` matrix.
fn weight_matrix<F: Real>(axes: &[AxisWeights<F>], len: usize) -> Array2<F> {
    let mut m = Array2::zeros((axes.len(), len));
    for (mut row, ax) in m.outer_iter_mut().zip(axes) {
        row.as_slice_mut().expect("contiguous").copy_from_slice(&ax.w);
    }
    m
}

/// Gradients of `L = sum_i dG[i] * G[i]` with respect to every glimpse input.
#[derive(Clone, Debug, PartialEq)]
pub struct GlimpseGrads<F> {
    pub d_image: Array2<F>,
    pub d_mu: Array2<F>,
    pub d_log_sigma: Array1<F>,
    pub d_center: [F; 2],
    pub d_zoom: F,
}

pub fn glimpse_backward<F: Real>(
    image: ArrayView2<'_, F>,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
    d_glimpse: &[F],
) -> Result<GlimpseGrads<F>> {
    glimpse_backward_windowed(image, lattice, control, d_glimpse, Window::Full)
}

pub fn glimpse_backward_windowed<F: Real>(
    image: ArrayView2<'_, F>,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
    d_glimpse: &[F],
    window: Window,
) -> Result<GlimpseGrads<F>> {
    check_image(&image)?;
    control.validate()?;
    if d_glimpse.len() != lattice.len() {
        return Err(Error::invalid(format!(
            "upstream gradient has {} entries, lattice has {} kernels",
            d_glimpse.len(),
            lattice.len()
        )));
    }
    let mut d_image = Array2::zeros(image.dim());
    let mut d_mu = Array2::zeros(lattice.mu.dim());
    let mut d_log_sigma = Array1::zeros(lattice.len());
    let (d_center, d_zoom) = sample_backward(
        image,
        lattice,
        control,
        window,
        d_glimpse,
        d_mu.view_mut(),
        d_log_sigma.as_slice_mut().expect("contiguous"),
        Some(d_image.view_mut()),
    );
    Ok(GlimpseGrads {
        d_image,
        d_mu,
        d_log_sigma,
        d_center,
        d_zoom,
    })
}

/// Unchecked backward pass. Lattice gradients accumulate into `d_mu` and
/// `d_log_sigma`; the image gradient is only formed when requested.
/// Returns the gradient with respect to the control state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sample_backward<F: Real>(
    image: ArrayView2<'_, F>,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
    window: Window,
    d_glimpse: &[F],
    mut d_mu: ArrayViewMut2<'_, F>,
    d_log_sigma: &mut [F],
    mut d_image: Option<ArrayViewMut2<'_, F>>,
) -> ([F; 2], F) {
    let (height, width) = image.dim();
    if window == Window::Full {
        return full_backward(image, lattice, control, d_glimpse, d_mu, d_log_sigma, d_image);
    }
    let image = image.as_standard_layout();
    let pixels = image.as_slice().expect("standard layout");
    let mut d_center = [F::zero(); 2];
    let mut d_zoom = F::zero();
    let mut row_sums: Vec<F> = Vec::new();
    let mut col_sums: Vec<F> = Vec::new();

    for (i, &dg) in d_glimpse.iter().enumerate() {
        if dg == F::zero() {
            continue;
        }
        let [cx, cy] = kernel_center(lattice, control, i);
        let sigma = lattice.sigma(i);
        let s = control.zoom * sigma;
        let ax = axis_weights(cx, s, width, window);
        let ay = axis_weights(cy, s, height, window);

        // row_sums[n] = sum_m U[n,m] wx[m];  col_sums[m] = sum_n wy[n] U[n,m]
        row_sums.clear();
        col_sums.clear();
        col_sums.resize(ax.w.len(), F::zero());
        for (dn, &wy) in ay.w.iter().enumerate() {
            let row = &pixels[(ay.start + dn) * width + ax.start..][..ax.w.len()];
            let mut r = F::zero();
            for ((&u, &wx), c) in row.iter().zip(&ax.w).zip(col_sums.iter_mut()) {
                r = r + u * wx;
                *c = *c + wy * u;
            }
            row_sums.push(r);
        }

        let grad_wx: Vec<F> = col_sums.iter().map(|&c| dg * c).collect();
        let grad_wy: Vec<F> = row_sums.iter().map(|&r| dg * r).collect();
        let (dcx, dsx) = ax.backward(&grad_wx, s);
        let (dcy, dsy) = ay.backward(&grad_wy, s);
        accumulate_kernel(
            i,
            lattice,
            control,
            (dcx, dcy, dsx + dsy),
            &mut d_mu,
            d_log_sigma,
            &mut d_center,
            &mut d_zoom,
        );

        if let Some(d_image) = d_image.as_mut() {
            for (dn, &wy) in ay.w.iter().enumerate() {
                let mut row = d_image.index_axis_mut(Axis(0), ay.start + dn);
                for (dm, &wx) in ax.w.iter().enumerate() {
                    let cell = &mut row[ax.start + dm];
                    *cell = *cell + dg * wy * wx;
                }
            }
        }
    }
    (d_center, d_zoom)
}

/// Chain rule from the axis-weight gradients of kernel `i` to the lattice
/// and control accumulators.
#[allow(clippy::too_many_arguments)]
fn accumulate_kernel<F: Real>(
    i: usize,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
    (dcx, dcy, ds): (F, F, F),
    d_mu: &mut ArrayViewMut2<'_, F>,
    d_log_sigma: &mut [F],
    d_center: &mut [F; 2],
    d_zoom: &mut F,
) {
    let sigma = lattice.sigma(i);
    let s = control.zoom * sigma;
    d_mu[[i, 0]] = d_mu[[i, 0]] + dcx * control.zoom;
    d_mu[[i, 1]] = d_mu[[i, 1]] + dcy * control.zoom;
    d_log_sigma[i] = d_log_sigma[i] + ds * s;
    d_center[0] = d_center[0] + dcx;
    d_center[1] = d_center[1] + dcy;
    *d_zoom = *d_zoom + dcx * lattice.mu[[i, 0]] + dcy * lattice.mu[[i, 1]] + ds * sigma;
}

/// Full-support backward pass through two dense products:
/// `A = U Wx^T` (row sums) and `B = Wy U` (column sums).
fn full_backward<F: Real>(
    image: ArrayView2<'_, F>,
    lattice: &Lattice<F>,
    control: &ControlState<F>,
    d_glimpse: &[F],
    mut d_mu: ArrayViewMut2<'_, F>,
    d_log_sigma: &mut [F],
    d_image: Option<ArrayViewMut2<'_, F>>,
) -> ([F; 2], F) {
    let (height, width) = image.dim();
    let (ax, ay) = full_axes(lattice, control, height, width);
    let wx = weight_matrix(&ax, width);
    let wy = weight_matrix(&ay, height);
    let a = image.dot(&wx.t());
    let b = wy.dot(&image);
    let mut d_center = [F::zero(); 2];
    let mut d_zoom = F::zero();
    let mut grad_wx = vec![F::zero(); width];
    let mut grad_wy = vec![F::zero(); height];
    for (i, &dg) in d_glimpse.iter().enumerate() {
        if dg == F::zero() {
            continue;
        }
        let s = control.zoom * lattice.sigma(i);
        for (g, &c) in grad_wx.iter_mut().zip(b.row(i)) {
            *g = dg * c;
        }
        for (g, &r) in grad_wy.iter_mut().zip(a.column(i)) {
            *g = dg * r;
        }
        let (dcx, dsx) = ax[i].backward(&grad_wx, s);
        let (dcy, dsy) = ay[i].backward(&grad_wy, s);
        accumulate_kernel(
            i,
            lattice,
            control,
            (dcx, dcy, dsx + dsy),
            &mut d_mu,
            d_log_sigma,
            &mut d_center,
            &mut d_zoom,
        );
    }
    if let Some(mut d_image) = d_image {
        // dU = Wy^T diag(dG) Wx
        let mut scaled = wy;
        for (mut row, &dg) in scaled.outer_iter_mut().zip(d_glimpse) {
            row.mapv_inplace(|v| v * dg);
        }
        ndarray::linalg::general_mat_mul(F::one(), &scaled.t(), &wx, F::one(), &mut d_image);
    }
    (d_center, d_zoom)
}
