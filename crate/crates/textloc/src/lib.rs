//! Operator surface for the text/location OCR model: the commands behind
//! the `textloc` binary and an HTTP inference service.
//!
//! The model, training and evaluation live in `textloc-core`,
//! `textloc-model` and `textloc-train`; they are re-exported here as
//! [`core`], [`model`] and [`train`].

pub mod commands;
pub mod inference;
pub mod server;

mod error;

pub use error::{Error, InferError};
pub use inference::{Engine, InferenceRequest, InferenceResponse, ResponseElement, ServiceTask};
pub use textloc_core as core;
pub use textloc_model as model;
pub use textloc_train as train;
