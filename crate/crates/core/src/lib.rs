//! Depth completion for RGB-D images with gated convolutions and
//! boundary-consistency supervision.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod edge;
pub mod error;
pub mod gated;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod ssim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type DepthMap32 = data::DepthMap<f32>;
pub type DepthMap64 = data::DepthMap<f64>;
pub type Sample32 = data::Sample<f32>;
pub type Sample64 = data::Sample<f64>;
pub type Pipeline32 = networks::Pipeline<f32>;
pub type Pipeline64 = networks::Pipeline<f64>;
