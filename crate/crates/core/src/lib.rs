//! Few-shot keypoint detection with uncertainty learning, end to end on a
//! procedurally generated articulated-creature benchmark.
//!
//! The crate is organized around the numerical pipeline:
//!
//! - [`tensor`], [`linalg`], [`rng`]: dense `f64` arrays, small direct
//!   factorizations, and seeded deterministic random streams.
//! - [`autodiff`]: a minimal reverse-mode engine with a finite-difference
//!   gradient checker; every trainable piece of the detector runs on it.
//! - [`grid`]: the grid-classification / offset-regression localization
//!   codec, multi-scale prediction fusion, and PCK scoring.
//! - [`uncertainty`]: Gaussian negative log-likelihood losses in covariance
//!   and precision form, semantic-distinctiveness weighting, covariance
//!   fusion across scales, and uncertainty ellipses.
//! - [`synth`]: the articulated 2-D creature generator, dataset splits,
//!   and the episode sampler.
//! - [`pipeline`]: prototypes, feature modulation, descriptor extraction,
//!   multi-scale localization heads, episodic training, and inference.
//! - [`tps`]: the uncertainty-weighted thin-plate-spline solver and image
//!   remapper.
//! - [`config`], [`io`]: run configuration and PPM/PGM/SVG/JSON artifacts.

pub mod autodiff;
pub mod config;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tps;
pub mod uncertainty;

pub use tensor::Tensor;
