//! Noise-conditioned diffusion speech enhancement on synthetic signals.
//!
//! The crate implements the full pipeline at desk scale: a recorded
//! reverse-mode autodiff core over 64-bit tensors, interpolating diffusion
//! schedules with derived posterior coefficients, a noise-classification
//! conditioner with three injection modes, a residual denoiser, multi-task
//! training, ancestral sampling, a synthetic labeled corpus generator, and
//! signal-quality metrics. Everything is deterministic given a seed.

pub mod error;
pub mod par;
pub mod rng;
pub mod tape;
pub mod tensor;

pub mod checkpoint;
pub mod conditioner;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
