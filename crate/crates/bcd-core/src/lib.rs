//! Scalable image codec built on bit-plane decomposition.
//!
//! An RGB image is split into bit planes; each significance level gets its
//! own coding branch built from cross-branch gated units. Decoding any
//! prefix of the branches yields a progressively refined reconstruction.
//!
//! All numerics are generic over [`Scalar`] (f32 for shipping weights, f64
//! for gradient checks); the crate root exports concrete aliases.

pub mod bitplane;
pub mod codec;
pub mod coder;
pub mod container;
pub mod error;
pub mod gates;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod ppm;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CodecModel32 = codec::CodecModel<f32>;
pub type CodecModel64 = codec::CodecModel<f64>;

/// 32-bit tensors: the precision models ship in.
pub type Tensor32 = tensor::Tensor<f32>;
/// 64-bit tensors: used by gradient checks and numerical oracles.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
