//! Diffusion-based robust degradation remover (DR2) with a small
//! enhancement stack, evaluation metrics and an experiment harness.

pub mod checkpoint;
pub mod dataset;
pub mod degradation;
pub mod denoiser;
pub mod enhancement;
pub mod error;
pub mod harness;
pub mod image;
pub mod lowpass;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
pub use image::ImageTensor;
