//! Learned perceptual image distance: feature backbone, channel-weighted
//! distance, calibration head, adversarial tuning, pixel-space and
//! perceptual attacks, 2AFC evaluation and reporting.

pub mod attack;
pub mod backbone;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod image;
pub mod metric;
pub mod optim;
pub mod perceptual;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::Tensor;
