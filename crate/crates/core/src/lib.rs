//! Label-efficient tissue-layer segmentation of sliced volumes.
//!
//! A ratio-conditioned generator synthesizes image-mask pairs between
//! sparsely annotated slices; the synthesized pairs augment the training set
//! of a per-pixel layer segmenter. The crate also carries the evaluation
//! suite (Dice, Fréchet distance, Inception Score, effect sizes, paired
//! tests) and a synthetic layered-phantom generator used in place of
//! clinical data.
//!
//! Numerical code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below fix the precision used by training and by gradient checks.

pub mod autograd;
pub mod deblur;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod plan;
pub mod scalar;
pub mod seg;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use phantom::{ImageMaskPair, SliceStack, TissueLayer};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor, the training default.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Var32 = autograd::Var<f32>;
pub type Var64 = autograd::Var<f64>;

/// Inter-slice generator at training precision.
pub type InterSliceGan = gan::InterSliceGan<f32>;
/// Inter-slice generator in double precision (gradient checks).
pub type InterSliceGan64 = gan::InterSliceGan<f64>;
pub type DeblurModel = deblur::DeblurModel<f32>;
pub type Segmenter = seg::Segmenter<f32>;
pub type FeatureEmbedder = metrics::fid::FeatureEmbedder<f32>;
pub type FeatureStats = metrics::fid::FeatureStats<f64>;
