//! Minimal tensor + reverse-mode autodiff layer used by the guidance network
//! and the denoiser.

pub mod kernels;
mod layers;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use params::{uniform_init, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use layers::{group_count, Conv, GroupNorm, Linear};
