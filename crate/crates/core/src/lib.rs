//! Streaming decoder-only speech recognition on synthetic audio.
//!
//! The model consumes audio as a stream of fixed-duration chunk embeddings
//! interleaved with the tokens it has emitted so far. A dedicated BLANK token
//! ends each burst of emissions and hands control back to the audio stream;
//! BLANK itself never enters the decode history. Everything here is built on
//! a small reverse-mode autodiff tape over row-major tensors, generic over
//! the scalar type (`f32` for production, `f64` for high-precision checks).

pub mod error;
pub mod graph;
pub mod inference;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod targets;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by shipped models and all on-disk formats.
pub type DefaultScalar = f32;

/// Tensor with the production scalar type.
pub type Tensor = tensor::Tensor<DefaultScalar>;
/// Autodiff tape with the production scalar type.
pub type Graph = graph::Graph<DefaultScalar>;
/// Model with the production scalar type.
pub type Model = model::Model<DefaultScalar>;
/// Incremental decode state with the production scalar type.
pub type DecoderState = model::DecoderState<DefaultScalar>;
/// Interleaved training sample with the production scalar type.
pub type InterleavedSample = targets::InterleavedSample<DefaultScalar>;
