//! Conditional variational diffusion: learned per-element variance schedules,
//! a noise-predicting U-Net, training, sampling, and the supporting optics,
//! metrics and convergence tooling.

pub mod autograd;
pub mod convergence;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod qpi;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{CvdmError, Result};
pub use tensor::Tensor;
