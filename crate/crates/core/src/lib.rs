//! Stereo-consistent view synthesis: a synthesis network that predicts the
//! middle view of a stereo triplet from its left and right views, a
//! decomposition network that maps the middle view back, and a discriminator.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod image;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image, PixelRange};
pub use tensor::Tensor;
pub use arch::{Ablation, ArchConfig};
pub use data::ViewTriplet;
pub use models::{ModelBundle, ModelConfig};
pub use trainer::{TrainConfig, TrainState};
