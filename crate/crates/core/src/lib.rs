//! Multi-stage noise-decoupling denoiser for hyperspectral cubes.
//!
//! Explicit camera noise (shot, readout, stripe) is synthesized from a calibrated physical
//! model and removed by a pre-trained network (EMNet). The remaining implicit noise is
//! handled by a wavelet-guided network (IMNet) placed in front of it, and both are then
//! fine-tuned jointly.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! element type used by the pipeline.

pub mod autograd;
pub mod checkpoint;
pub mod conv;
pub mod cube_io;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod noise_synth;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod wavelet;

pub use error::{HsidError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
