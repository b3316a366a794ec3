//! Structural pruning of diffusion denoisers with learnable hard-concrete
//! gates, an end-to-end trajectory loss and time-step gradient
//! checkpointing.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! `*64` aliases below pin the double-precision instantiation that the
//! gradient checks are calibrated for.

pub mod compactor;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gates;
pub mod grad;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = grad::Tape<f64>;
pub type Denoiser64 = denoiser::Denoiser<f64>;
pub type Denoiser32 = denoiser::Denoiser<f32>;
pub type GateConfig64 = gates::GateConfig<f64>;
pub type NoiseSchedule64 = diffusion::NoiseSchedule<f64>;
pub type PruneConfig64 = trainer::PruneConfig<f64>;
