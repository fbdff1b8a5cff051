//! Sampling-pattern-agnostic diffusion reconstruction of undersampled MRI.
//!
//! The crate covers the complex image / k-space containers, sampling masks,
//! the multi-coil encoding operator, noise schedules, noise-prediction
//! models, the consistency rules, the samplers and a small benchmark
//! harness.

pub mod config;
pub mod consistency;
pub mod cxg;
pub mod denoiser;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod fft;
pub mod grid;
pub mod masks;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
