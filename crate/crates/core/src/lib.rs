//! Instruction-conditioned future-frame prediction: synthetic episode
//! rendering, paired dataset assembly, a latent diffusion model with text
//! conditioning, deterministic training, and an evaluation harness.

pub mod checkpoint;
pub mod codec;
pub mod denoiser;
pub mod dataset;
pub mod episode;
pub mod config;
pub mod error;
pub mod eval;
pub mod loss;
pub mod img;
pub mod metrics;
pub mod model;
pub mod peft;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod trainer;

pub use error::{CoreError, Result};
