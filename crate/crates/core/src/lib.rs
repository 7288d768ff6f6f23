//! Context module for black-box autoencoders: expressive layer, reduced-form
//! SEM intervention layer and linear representation layer, with a VAE
//! training harness and distributional evaluation metrics.

pub mod blackbox;
pub mod data;
pub mod decoder;
mod error;
pub mod eval;
pub mod metrics;
pub mod params;
pub mod sem;
pub mod vae;

pub use error::{CoreError, Result};
