//! Attention-based convolutional LSTM network for script identification in
//! scene-text images.
//!
//! A height-normalized text line is cut into overlapping 32×32 patches. A
//! CNN encodes each patch, a two-layer peephole LSTM reads the sequence,
//! attention weights the patches, and local and global features are mixed
//! per patch before classification. The per-patch class distributions are
//! pooled with the attention weights.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two instantiations used in practice.

pub mod attention;
pub mod attnmap;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod params;
pub mod preprocess;
mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision parameters, as trained and checkpointed.
pub type Model = model::ModelParams<f32>;
/// Double-precision parameters, for gradient checking.
pub type Model64 = model::ModelParams<f64>;
pub type Gradients = model::GradientSet<f32>;
pub type Gradients64 = model::GradientSet<f64>;
pub type Adam = optim::AdamState<f32>;
