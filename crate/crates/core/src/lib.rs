//! Explaining paragraph similarity under BERT-style encoders.
//!
//! Given two paragraphs, the engine differentiates the cosine similarity of
//! their pooled encoder features with respect to each paragraph's embedding
//! activations, scores tokens by the rectified gradient-activation product,
//! lifts the scores and latents to whole words, matches words across the two
//! paragraphs and keeps the highest-scoring word pairs found by 1-D mean
//! shift.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common instantiations.

// `!(x > y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod clustering;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod sanity;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;

pub use error::{BtiError, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type EncoderWeights64 = encoder::EncoderWeights<f64>;
pub type EncoderWeights32 = encoder::EncoderWeights<f32>;
pub type Explanation64 = pipeline::Explanation<f64>;
pub type Explanation32 = pipeline::Explanation<f32>;
pub type WordLevelView64 = tokenizer::WordLevelView<f64>;
pub type SimilarityIndex64 = corpus::SimilarityIndex<f64>;
