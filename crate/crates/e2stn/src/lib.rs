//! Cross-dataset EEG emotion recognition with stylized sample transfer.
//!
//! The pipeline: a transfer network fuses the emotional content of labeled
//! source-domain EEG feature samples with the statistical style of an
//! unlabeled target domain; a dynamic-graph Chebyshev classifier is trained
//! on originals plus stylized samples under a four-term objective
//! (content, style, identity, cross-entropy). Everything is generic over
//! the scalar type: f32 for training throughput, f64 for gradient
//! verification and checkpoint payloads.

pub mod checkpoint;
pub mod data_model;
pub mod discriminative;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod params;
pub mod scalar;
pub mod signal_prep;
pub mod tensor;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training scalar.
pub type TrainScalar = f32;
/// Scalar used by gradient checking and checkpoint payloads.
pub type CheckScalar = f64;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
