//! Interactive region segmentation and captioning.
//!
//! Clicks are turned into per-polarity distance maps, stacked with the RGB
//! image, and fed to a small fully convolutional network whose final layers
//! use decreasing 7/5/3 kernels. The predicted region is then matched against
//! captioned region proposals to pick a description.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below name the
//! concrete instantiations used by the binaries (`f32`) and by the
//! reference checks (`f64`).

pub mod error;
pub mod experiment;
pub mod fusion;
pub mod imagecore;
pub mod interaction;
pub mod lfcn;
pub mod metrics;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = lfcn::Tensor<f32>;
pub type Tensor64 = lfcn::Tensor<f64>;
pub type Network32 = lfcn::Network<f32>;
pub type Network64 = lfcn::Network<f64>;
pub type VoronoiMap32 = interaction::VoronoiMap<f32>;
pub type VoronoiMap64 = interaction::VoronoiMap<f64>;
pub type TrainingPair32 = interaction::TrainingPair<f32>;
pub type TrainingPair64 = interaction::TrainingPair<f64>;
