//! Diffusion-policy laboratory: a small differentiable tensor engine, DDPM
//! noising and sampling, AdaLN and cross-attention transformer trunks, a
//! training loop with per-block gradient instrumentation, and toy 2-D
//! control tasks with multimodal scripted experts.

pub mod compute;
pub mod ddpm;
pub mod envs;
pub mod error;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
