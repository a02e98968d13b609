//! Binary tensor container and the model checkpoint built on it.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, the JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use textloc_core::Vocabulary;

use crate::error::ModelError;
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"TXLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    tensors: Vec<TensorEntry>,
    meta: Value,
}

/// Serializes named tensors plus arbitrary JSON metadata.
pub fn encode_container(meta: &Value, tensors: &[(TensorEntry, &[f32])]) -> Result<Vec<u8>, ModelError> {
    for (e, data) in tensors {
        if e.shape.iter().product::<usize>() != data.len() {
            return Err(ModelError::Checkpoint(format!("{}: shape does not match data", e.name)));
        }
    }
    let header = serde_json::to_vec(&Container {
        tensors: tensors.iter().map(|(e, _)| e.clone()).collect(),
        meta: meta.clone(),
    })?;
    let body: usize = tensors.iter().map(|(_, d)| d.len() * 4).sum();
    let mut out = Vec::with_capacity(20 + header.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, data) in tensors {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Inverse of [`encode_container`].
pub fn decode_container(bytes: &[u8]) -> Result<(Value, Vec<(TensorEntry, Vec<f32>)>), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Container = serde_json::from_slice(&bytes[20..body_start])?;
    let mut pos = body_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = pos.checked_add(n * 4).filter(|&end| end <= bytes.len()).ok_or_else(|| bad("truncated tensor data"))?;
        let data = bytes[pos..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        pos = end;
        tensors.push((e, data));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header.meta, tensors))
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: ModelConfig,
    vocabulary: String,
    vocab_hash: String,
}

const MODEL_KIND: &str = "model";

pub fn to_bytes(model: &Model<f32>) -> Result<Vec<u8>, ModelError> {
    let meta = ModelMeta {
        kind: MODEL_KIND.into(),
        config: model.config().clone(),
        vocabulary: model.vocab().to_json(),
        vocab_hash: model.vocab().hash(),
    };
    let tensors: Vec<(TensorEntry, &[f32])> = model
        .param_specs()
        .iter()
        .zip(model.params())
        .map(|(s, p)| (TensorEntry { name: s.name.clone(), shape: s.shape.clone() }, p.as_slice()))
        .collect();
    encode_container(&serde_json::to_value(meta)?, &tensors)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>, ModelError> {
    let (meta, tensors) = decode_container(bytes)?;
    let meta: ModelMeta = serde_json::from_value(meta)?;
    if meta.kind != MODEL_KIND {
        return Err(ModelError::Checkpoint(format!("expected a model checkpoint, found {:?}", meta.kind)));
    }
    let vocab = Vocabulary::from_json(&meta.vocabulary)?;
    if vocab.hash() != meta.vocab_hash {
        return Err(ModelError::VocabularyMismatch { expected: meta.vocab_hash, found: vocab.hash() });
    }
    let entries: Vec<TensorEntry> = tensors.iter().map(|(e, _)| e.clone()).collect();
    let model = Model::from_parts(meta.config, vocab, tensors.into_iter().map(|(_, d)| d).collect())?;
    for (e, s) in entries.iter().zip(model.param_specs()) {
        if e.name != s.name || e.shape != s.shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} {:?} does not match layout {} {:?}",
                e.name, e.shape, s.name, s.shape
            )));
        }
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<(), ModelError> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<Model<f32>, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it unless its vocabulary matches `vocab`.
pub fn load_expecting(path: &Path, vocab: &Vocabulary) -> Result<Model<f32>, ModelError> {
    let model = load(path)?;
    if model.vocab().hash() != vocab.hash() {
        return Err(ModelError::VocabularyMismatch { expected: vocab.hash(), found: model.vocab().hash() });
    }
    Ok(model)
}

/// SHA-256 of a checkpoint's bytes, as lowercase hex.
pub fn bytes_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
