//! Exemplar-conditioned GANs for eye in-painting.

pub mod checkpoint;
pub mod compressor;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod evaluation;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod masking;
pub mod nn;
pub mod tensor;
pub mod training;

pub use compressor::{Compressor, CompressorConfig, EyeCode};
pub use data::{EyeAnnotation, IdentityRecord, TrainingSample};
pub use error::{Error, Result};
pub use geometry::Rect;
pub use tensor::Tensor;
