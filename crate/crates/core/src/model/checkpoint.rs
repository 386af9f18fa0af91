//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, a JSON header
//! (shape, layout, seed, training config), then every parameter as f64
//! little-endian. All integers are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{HeadParams, HeadShape, TrainConfig};

const MAGIC: &[u8; 8] = b"VPKHEAD\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a head checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated or malformed: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: HeadShape,
    layout: String,
    seed: u64,
    n_params: usize,
    train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

/// A decoded checkpoint with its optional provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: HeadParams,
    pub train_config: Option<TrainConfig>,
    pub provenance: Option<String>,
}

pub fn encode(params: &HeadParams, config: Option<&TrainConfig>) -> Vec<u8> {
    encode_tagged(params, config, None)
}

/// Like [`encode`], recording a free-form provenance tag in the header.
pub fn encode_tagged(params: &HeadParams, config: Option<&TrainConfig>, provenance: Option<&str>) -> Vec<u8> {
    let header = Header {
        provenance: provenance.map(str::to_string),
        shape: params.shape,
        layout: params.layout.clone(),
        seed: params.seed,
        n_params: params.theta.len(),
        train_config: config.cloned(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * params.theta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &params.theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(HeadParams, Option<TrainConfig>), CheckpointError> {
    decode_tagged(bytes).map(|c| (c.params, c.train_config))
}

pub fn decode_tagged(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let short = || CheckpointError::Malformed("truncated".into());
    if bytes.len() < 20 {
        return Err(if bytes.starts_with(MAGIC) { short() } else { CheckpointError::BadMagic });
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(short)?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if header.n_params != header.shape.n_params() {
        return Err(CheckpointError::Malformed("parameter count does not match shape".into()));
    }
    let rest = &bytes[20 + hlen..];
    if rest.len() != 8 * header.n_params {
        return Err(short());
    }
    let theta = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Checkpoint {
        params: HeadParams {
            shape: header.shape,
            theta,
            layout: header.layout,
            seed: header.seed,
        },
        train_config: header.train_config,
        provenance: header.provenance,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &HeadParams,
    config: Option<&TrainConfig>,
) -> Result<(), CheckpointError> {
    fs::write(path, encode(params, config))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(HeadParams, Option<TrainConfig>), CheckpointError> {
    decode(&fs::read(path)?)
}
