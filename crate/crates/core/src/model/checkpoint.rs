//! Checkpoint container.
//!
//! Layout: the magic bytes `DMGCKPT\0`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header (config, layout, domain,
//! training metadata, weight count) and finally the weights as little-endian
//! `f64`. Weights are stored raw so a save/load round trip is bitwise exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainTag, ModelCheckpoint, ModelConfig, ParamBlock, TrainingMeta};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DMGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    layout: Vec<ParamBlock>,
    domain: DomainTag,
    meta: TrainingMeta,
    weight_count: usize,
}

pub(crate) fn encode(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        layout: ckpt.layout.clone(),
        domain: ckpt.domain,
        meta: ckpt.meta.clone(),
        weight_count: ckpt.weights.len(),
    })
    .expect("header serializes");
    let mut buf = Vec::with_capacity(20 + header.len() + 8 * ckpt.weights.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for w in &ckpt.weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    buf
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let body = &bytes[header_end..];
    if body.len() != header.weight_count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} weight bytes, found {}",
            header.weight_count * 8,
            body.len()
        )));
    }
    let weights = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let ckpt = ModelCheckpoint {
        config: header.config,
        layout: header.layout,
        weights,
        domain: header.domain,
        meta: header.meta,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
