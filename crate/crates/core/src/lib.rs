//! Wasserstein autoencoder with a Gaussian-mixture prior for
//! style-controlled text generation: training, style-conditioned and
//! style-interpolated sampling, and an evaluation suite (distinct-n,
//! entropy, Kneser-Ney perplexity, style classification, JSD reports).
//!
//! The numeric core is generic over the scalar type: training runs at
//! `f32`, gradient checking at `f64`. Concrete aliases for the common
//! instantiations live at the crate root.

pub mod error;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tape.
pub type Tape32 = tensor::Tape<f32>;
/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check-precision tape.
pub type Tape64 = tensor::Tape<f64>;
/// Gradient-check-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
