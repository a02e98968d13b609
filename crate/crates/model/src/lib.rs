//! A small image-to-sequence model that reads a page and emits text and
//! quantized location tokens from one decoder.
//!
//! The network is a strided convolutional encoder with 2-D sinusoidal
//! positions, followed by a pre-norm transformer decoder with causal
//! self-attention and cross-attention. Training uses the reverse-mode
//! differentiation in [`tape`]; inference uses a key/value cache.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod model;
pub mod probe;
pub mod real;
pub mod tape;

pub use error::ModelError;
pub use model::{
    argmax, Batch, ConvStage, Generation, InkImage, LossBreakdown, LossClass, Memory, Model, ModelConfig,
    ParamGroup, ParamSpec, Sample,
};
pub use probe::{location_embedding_continuity, ContinuityReport};
pub use real::Real;
