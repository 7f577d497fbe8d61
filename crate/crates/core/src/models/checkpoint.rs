//! Single-file encoder checkpoints.
//!
//! Layout: the magic bytes `IFCK`, a little-endian `u32` header length, a
//! JSON header, then every parameter as little-endian `f32` in header
//! order. The header carries a SHA-256 of the parameter bytes.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::encoder::{EncoderClassifier, Params, TokenizationConfig, TrainingMeta};
use super::ModelConfig;
use crate::features::{FeatureEncoder, FeatureLayout, ScalingSpec};
use crate::tokenizer::{Tokenizer, TokenizerError, TokenizerSpec};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"IFCK";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint checksum mismatch (file truncated or modified)")]
    Checksum,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureHeader {
    layout: FeatureLayout,
    scaling: ScalingSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tokenization: TokenizationConfig,
    features: Option<FeatureHeader>,
    tokenizer: TokenizerSpec,
    meta: TrainingMeta,
    params: Vec<ParamEntry>,
    checksum: String,
}

/// Header facts, without the parameter payload.
#[derive(Debug, Clone, Serialize)]
pub struct CheckpointSummary {
    pub version: u32,
    pub config: ModelConfig,
    pub tokenization: TokenizationConfig,
    pub feature_names: Option<Vec<String>>,
    pub vocab_size: usize,
    pub merges: usize,
    pub meta: TrainingMeta,
    pub parameters: usize,
    pub extension_parameters: usize,
    pub checksum: String,
}

pub fn save(model: &EncoderClassifier<f32>, tokenizer: &Tokenizer, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut data = Vec::with_capacity(model.params.numel() * 4);
    for v in model.params.values() {
        for x in v.iter() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        tokenization: model.tokenization,
        features: model.features.as_ref().map(|f| FeatureHeader {
            layout: (*f.layout).clone(),
            scaling: f.scaling.clone(),
        }),
        tokenizer: tokenizer.spec(),
        meta: model.meta.clone(),
        params: model
            .params
            .iter()
            .map(|(name, v)| ParamEntry {
                name: name.to_string(),
                shape: [v.nrows(), v.ncols()],
            })
            .collect(),
        checksum: format!("{:x}", Sha256::digest(&data)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    fs::write(path, out)?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(Header, &[u8]), CheckpointError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| CheckpointError::Header("header truncated".into()))?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, &bytes[8 + len..]))
}

pub fn load(path: impl AsRef<Path>) -> Result<(EncoderClassifier<f32>, Tokenizer), CheckpointError> {
    let bytes = fs::read(path)?;
    let (header, data) = read_header(&bytes)?;
    if format!("{:x}", Sha256::digest(data)) != header.checksum {
        return Err(CheckpointError::Checksum);
    }
    let expected: usize = header.params.iter().map(|p| p.shape[0] * p.shape[1] * 4).sum();
    if expected != data.len() {
        return Err(CheckpointError::Header(format!(
            "parameter payload is {} bytes, header declares {expected}",
            data.len()
        )));
    }
    let mut params = Params::default();
    let mut offset = 0;
    for p in &header.params {
        let n = p.shape[0] * p.shape[1];
        let values: Vec<f32> = data[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        offset += 4 * n;
        let arr = Array2::from_shape_vec((p.shape[0], p.shape[1]), values).map_err(|e| CheckpointError::Header(e.to_string()))?;
        params.push(p.name.clone(), arr);
    }
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let model = EncoderClassifier {
        config: header.config,
        params,
        features: header.features.map(|f| FeatureEncoder {
            scaling: f.scaling,
            layout: Arc::new(f.layout),
        }),
        tokenization: header.tokenization,
        meta: header.meta,
    };
    let tokenizer = Tokenizer::from_spec(&header.tokenizer)?;
    Ok((model, tokenizer))
}

pub fn inspect(path: impl AsRef<Path>) -> Result<CheckpointSummary, CheckpointError> {
    let bytes = fs::read(path)?;
    let (h, _) = read_header(&bytes)?;
    let count = |pred: &dyn Fn(&str) -> bool| -> usize {
        h.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.shape[0] * p.shape[1])
            .sum()
    };
    Ok(CheckpointSummary {
        version: h.version,
        tokenization: h.tokenization,
        feature_names: h.features.as_ref().map(|f| f.layout.names.clone()),
        vocab_size: h.tokenizer.tokens.len(),
        merges: h.tokenizer.merges.len(),
        meta: h.meta.clone(),
        parameters: count(&|_| true),
        extension_parameters: count(&|n| n.contains("feature")),
        checksum: h.checksum.clone(),
        config: h.config,
    })
}
