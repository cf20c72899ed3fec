//! Key-gated decoding on a small convolutional autoencoder: models,
//! training, metrics, a latent watermark and an attack toolbox.

pub mod attacks;
pub mod data;
pub mod features;
mod error;
pub mod image;
pub mod io;
pub mod keying;
pub mod metrics;
pub mod model;
pub mod training;
pub mod watermark;

pub use error::{Error, Result};
pub use image::ImageF32;
