//! Request-level inference shared by the HTTP service and `infer`.

use std::path::Path;
use std::sync::Arc;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use textloc_core::{
    decode_box, decode_page, decode_text, dequantize, encode_prompt, expand, quantize, BBox, Diagnostics,
    EncodingScheme, TaskPrompt,
};
use textloc_model::{checkpoint, InkImage, Model};

use crate::error::{Error, InferError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceTask {
    Ocr,
    OcrLayout,
    Region,
    Locate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceRequest {
    /// Base64 PNG, optionally as a `data:` URL.
    pub image: String,
    pub task: ServiceTask,
    /// Pixel box `[x1, y1, x2, y2]` to read (`region` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[u32; 4]>,
    /// Text to find (`locate` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

impl InferenceRequest {
    pub fn new(png: &[u8], task: ServiceTask) -> Self {
        InferenceRequest {
            image: base64::engine::general_purpose::STANDARD.encode(png),
            task,
            region: None,
            query: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseElement {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub task: ServiceTask,
    /// Text lines with boxes (`ocr_layout`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements: Option<Vec<ResponseElement>>,
    /// Text lines (`ocr`, `region`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lines: Option<Vec<String>>,
    /// Located box (`locate`); `null` when none was generated.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Option<[u32; 4]>>,
    pub diagnostics: Diagnostics,
    /// Generation stopped at the length limit.
    pub truncated: bool,
    /// Padding applied to every returned box, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<f64>,
    pub model_version: String,
    pub vocab_version: String,
}

/// A loaded checkpoint ready to answer requests. Cloning shares the model.
#[derive(Clone)]
pub struct Engine {
    model: Arc<Model<f32>>,
    checkpoint_hash: String,
}

impl Engine {
    pub fn new(model: Model<f32>, checkpoint_hash: String) -> Self {
        Engine { model: Arc::new(model), checkpoint_hash }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        Ok(Engine::new(checkpoint::from_bytes(bytes)?, checkpoint::bytes_hash(bytes)))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Engine::from_bytes(&bytes)
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    /// SHA-256 of the checkpoint file.
    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn vocab_hash(&self) -> String {
        self.model.vocab().hash()
    }

    /// Largest accepted image as (width, height).
    pub fn max_image(&self) -> (usize, usize) {
        let (h, w) = self.model.config().max_image();
        (w, h)
    }

    /// Decodes the PNG, checks it against the grid, and returns its ink.
    pub fn decode_image(&self, image: &str) -> Result<InkImage, InferError> {
        let b64 = match image.split_once(";base64,") {
            Some((prefix, rest)) if prefix.starts_with("data:") => rest,
            _ => image,
        };
        let png = base64::engine::general_purpose::STANDARD
            .decode(b64.trim())
            .map_err(|e| InferError::BadRequest(format!("image is not valid base64: {e}")))?;
        let decoded = image::load_from_memory_with_format(&png, image::ImageFormat::Png)
            .map_err(|e| InferError::BadRequest(format!("image is not a readable PNG: {e}")))?
            .to_luma8();
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let (max_w, max_h) = self.max_image();
        if w == 0 || h == 0 {
            return Err(InferError::BadRequest("image is empty".into()));
        }
        if w > max_w || h > max_h {
            return Err(InferError::BadRequest(format!("image {w}x{h} exceeds the supported {max_w}x{max_h}")));
        }
        InkImage::from_luma(w, h, decoded.as_raw()).map_err(|e| InferError::Internal(e.to_string()))
    }

    fn prompt(&self, req: &InferenceRequest, size: (usize, usize)) -> Result<TaskPrompt, InferError> {
        let bad = |m: &str| Err(InferError::BadRequest(m.into()));
        match (req.task, &req.region, &req.query) {
            (ServiceTask::Ocr, None, None) => Ok(TaskPrompt::OcrOnly),
            (ServiceTask::OcrLayout, None, None) => Ok(TaskPrompt::OcrLayout),
            (ServiceTask::Region, Some(r), None) => {
                let b = BBox::new(f64::from(r[0]), f64::from(r[1]), f64::from(r[2]), f64::from(r[3]))
                    .map_err(|e| InferError::BadRequest(e.to_string()))?;
                if b.x2 > size.0 as f64 || b.y2 > size.1 as f64 || b.x2 == b.x1 || b.y2 == b.y1 {
                    return bad("region must be a non-empty box inside the image");
                }
                Ok(TaskPrompt::ReadAt(quantize(&b, self.model.vocab().grid())))
            }
            (ServiceTask::Locate, None, Some(q)) => Ok(TaskPrompt::FindIt(q.clone())),
            (ServiceTask::Region, _, _) => bad("task region takes exactly a region"),
            (ServiceTask::Locate, _, _) => bad("task locate takes exactly a query"),
            _ => bad("tasks ocr and ocr_layout take neither region nor query"),
        }
    }

    /// Runs one request. With `pad`, every returned box is grown by that
    /// many pixels; boxes are always clipped to the image.
    pub fn infer(&self, req: &InferenceRequest, pad: Option<f64>) -> Result<InferenceResponse, InferError> {
        if let Some(p) = pad {
            if !p.is_finite() || p < 0.0 {
                return Err(InferError::BadRequest(format!("pad must be a non-negative number, got {p}")));
            }
        }
        let image = self.decode_image(&req.image)?;
        let size = image.size();
        let size = (size.1, size.0);
        let prompt = self.prompt(req, size)?;
        let vocab = self.model.vocab();
        let ids = encode_prompt(&prompt, vocab).map_err(|e| match e {
            textloc_core::Error::UnknownChars { chars } => InferError::UnknownChars { chars },
            other => InferError::BadRequest(other.to_string()),
        })?;
        let generation = self
            .model
            .generate(&image, &ids, self.model.config().max_seq_len)
            .map_err(|e| InferError::Internal(e.to_string()))?;
        let to_px = |b: &BBox| pixel_box(b, pad.unwrap_or(0.0), size);
        let mut resp = InferenceResponse {
            task: req.task,
            elements: None,
            lines: None,
            bbox: None,
            diagnostics: Diagnostics::default(),
            truncated: generation.truncated,
            pad,
            model_version: self.checkpoint_hash.clone(),
            vocab_version: vocab.hash(),
        };
        let scheme: EncodingScheme = self.model.config().scheme;
        match req.task {
            ServiceTask::Ocr | ServiceTask::Region => {
                let (lines, diag) = decode_text(&generation.tokens, vocab);
                resp.lines = Some(lines);
                resp.diagnostics = diag;
            }
            ServiceTask::OcrLayout => {
                let page = decode_page(&generation.tokens, vocab, scheme);
                resp.elements = Some(
                    page.elements.iter().map(|e| ResponseElement { text: e.text.clone(), bbox: to_px(&e.bbox) }).collect(),
                );
                resp.diagnostics = page.diagnostics;
            }
            ServiceTask::Locate => {
                let (q, diag) = decode_box(&generation.tokens, vocab, scheme);
                resp.bbox = Some(q.map(|q| to_px(&dequantize(&q, vocab.grid()))));
                resp.diagnostics = diag;
            }
        }
        Ok(resp)
    }
}

/// Pads, clips to the image and rounds outward to whole pixels.
fn pixel_box(b: &BBox, pad: f64, (w, h): (usize, usize)) -> [u32; 4] {
    let e = expand(b, pad, w as f64, h as f64);
    let x2 = e.x2.max(e.x1);
    let y2 = e.y2.max(e.y1);
    [e.x1.floor() as u32, e.y1.floor() as u32, x2.ceil() as u32, y2.ceil() as u32]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_boxes_clip_and_pad() {
        let b = BBox { x1: 10.0, y1: 20.0, x2: 60.0, y2: 40.0 };
        assert_eq!(pixel_box(&b, 0.0, (100, 100)), [10, 20, 60, 40]);
        assert_eq!(pixel_box(&b, 1.0, (100, 100)), [9, 19, 61, 41]);
        assert_eq!(pixel_box(&b, 0.5, (100, 100)), [9, 19, 61, 41]);
        assert_eq!(pixel_box(&b, 0.0, (50, 30)), [10, 20, 50, 30]);
    }

    #[test]
    fn request_shape_is_strict() {
        let ok = r#"{"image":"AA==","task":"locate","query":"total"}"#;
        let req: InferenceRequest = serde_json::from_str(ok).unwrap();
        assert_eq!(req.task, ServiceTask::Locate);
        assert!(serde_json::from_str::<InferenceRequest>(r#"{"image":"AA==","task":"read"}"#).is_err());
        assert!(serde_json::from_str::<InferenceRequest>(r#"{"image":"AA==","task":"ocr","extra":1}"#).is_err());
        assert!(serde_json::from_str::<InferenceRequest>(r#"{"image":"AA==","task":"region","region":[1,2,-3,4]}"#).is_err());
    }
}
