//! Speech separation with a generative bridge-diffusion corrector.
//!
//! A discriminative separator produces first estimates; a score model
//! trained on a Brownian bridge between those estimates and the clean
//! sources then refines them, either with many reverse steps or with a
//! single fine-tuned step.

pub mod audio;
pub mod bridge;
pub mod cli;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod models;
mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod training;
pub mod specfun;

pub use error::{Error, Result};
