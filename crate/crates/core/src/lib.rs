//! Few-shot representation transfer.
//!
//! Feature extractors are learned from meta-learning (ANIL), supervised
//! classification, self-supervised pretext tasks, or joint multi-task
//! objectives, then frozen; novel n-way k-shot episodes are solved by a
//! multinomial logistic probe on their features, optionally widened with
//! auxiliary base-class logits and combined with transform-copy voting.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the concrete instantiations used by the pipelines.

pub mod adapt;
pub mod backbones;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod io;
pub mod meta;
pub mod nn;
pub mod pretext;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision extractor used for training and evaluation.
pub type Extractor = backbones::FeatureExtractor<f32>;
/// Double-precision extractor used by gradient checks.
pub type Extractor64 = backbones::FeatureExtractor<f64>;
pub type MetaState32 = meta::MetaState<f32>;
pub type Episode32 = data::Episode<f32>;
pub type TaskHead32 = pretext::TaskHead<f32>;
