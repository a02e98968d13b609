//! Building blocks for a generative OCR model that emits text and quantized
//! box coordinates from a single decoder.
//!
//! - [`geometry`]: pixel boxes, the quantization grid, IoU and padding.
//! - [`codec`]: the unified vocabulary, page/prompt encoding and tolerant decoding.
//! - [`synthgen`]: deterministic synthetic documents with exact line boxes.
//! - [`metrics`]: CER/WER, word P/R/F1, DetEval-style matching, AP@IoU and AP@CER.

pub mod codec;
pub mod font;
pub mod geometry;
pub mod metrics;
pub mod synthgen;

mod error;

pub use codec::{
    decode_box, decode_page, decode_text, encode_page, encode_prompt, expected_target, DecodedPage,
    Diagnostics, EncodingScheme, LineElement, TaskKind, TaskPrompt, TokenId, TokenKind,
    Vocabulary,
};
pub use error::Error;
pub use geometry::{dequantize, expand, iou, quantize, BBox, QuantBox, QuantGrid};
