//! Desk-scale engine for latent-space dataset distillation: a small
//! autodiff tensor core, a toy single-cell count generator, an autoencoder
//! stand-in for a frozen foundation model, a single-step conditional
//! diffusion generator, distribution/gradient matching losses over latent
//! codes, and an evaluation harness with baselines.

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod foundation;
pub mod generator;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
