//! Recurrent visual attention with a learnable retinal sampling lattice.
//!
//! The model reads a scene through a lattice of factored Gaussian kernels whose
//! offsets and widths are trained jointly with a two-layer recurrent network.
//! At every timestep the network emits a control state that translates (and,
//! in one variant, zooms) the whole lattice for the next glimpse.
//!
//! - [`glimpse`]: differentiable retinal sampler and its analytic gradients
//! - [`model`]: recurrent core, control and prediction heads, BPTT
//! - [`dataset`]: MNIST IDX ingestion and cluttered visual-search scenes
//! - [`training`]: loss, Adam, the training loop, checkpoints, gradcheck
//! - [`analysis`]: lattice geometry statistics and SVG/CSV exports

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod glimpse;
pub mod model;
pub mod real;
pub mod training;

pub use error::{Error, Result};
pub use glimpse::{ControlState, EffectiveKernels, GlimpseVector, Lattice, Window};
pub use model::{ModelDims, ModelParams, RnnState, Trace, Variant};
pub use real::Real;
