pub mod blursynth;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod evalkit;
pub mod guidance;
pub mod imagecore;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
