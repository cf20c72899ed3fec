//! On-disk formats.

pub mod checkpoint;
pub mod ppm;

pub use checkpoint::Checkpoint;
pub use ppm::{load_image, save_image};
