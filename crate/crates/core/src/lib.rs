//! Volumetric segmentation with a deeply supervised 3D encoder-decoder,
//! refined by adversarial training against a label-map discriminator.

pub mod adversary;
pub mod checkpoint;
pub mod di2in;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod metrics;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
