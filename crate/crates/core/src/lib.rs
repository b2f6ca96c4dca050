//! Channel simulation, JSCC codec, latent codec, conditioning, conditional
//! latent diffusion and image metrics.

pub mod channel;
pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod jscc;
pub mod latent;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod train;

pub use data::ImageSet;
pub use error::{CoreError, Result};
