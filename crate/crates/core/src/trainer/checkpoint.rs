//! Checkpoint container: magic bytes, little-endian `u64` header length, a JSON
//! header, then every parameter as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{ArmdError, Result};
use crate::model::{param_shapes, ModelConfig, ModelParams, Params};
use crate::numkernel::Tensor;

pub const MAGIC: &[u8; 8] = b"ARMDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    /// Number of `f32` values.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    model: ModelConfig,
    train: Option<TrainConfig>,
    tensors: Vec<ManifestEntry>,
    payload_bytes: u64,
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
}

fn integrity(offset: usize, reason: impl Into<String>) -> ArmdError {
    ArmdError::Integrity {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(
    params: &ModelParams,
    model: &ModelConfig,
    train: Option<&TrainConfig>,
    step: u64,
) -> Result<Vec<u8>> {
    params.check_shapes(model)?;
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for ((name, shape), t) in param_shapes(model).into_iter().zip(params.slots()) {
        let len = t.numel() as u64;
        tensors.push(ManifestEntry {
            name,
            shape,
            offset,
            len,
        });
        offset += 4 * len;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        step,
        model: model.clone(),
        train: train.cloned(),
        tensors,
        payload_bytes: offset,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.slots() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX {
        return Err(integrity(
            bytes.len(),
            "file is too short for the header prefix",
        ));
    }
    if &bytes[..8] != MAGIC {
        return Err(integrity(0, "bad magic bytes"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = PREFIX
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            integrity(
                8,
                format!("header length {header_len} runs past the end of the file"),
            )
        })?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..payload_start]).map_err(|e| {
        integrity(
            PREFIX + e.column().saturating_sub(1),
            format!("unreadable header: {e}"),
        )
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(integrity(
            PREFIX,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    header
        .model
        .validate()
        .map_err(|e| integrity(PREFIX, format!("invalid model config: {e}")))?;
    let expect = param_shapes(&header.model);
    if expect.len() != header.tensors.len() {
        return Err(integrity(
            PREFIX,
            format!(
                "manifest lists {} tensors, the config needs {}",
                header.tensors.len(),
                expect.len()
            ),
        ));
    }
    let mut offset = 0u64;
    for ((name, shape), entry) in expect.iter().zip(&header.tensors) {
        let numel: usize = shape.iter().product();
        if &entry.name != name
            || &entry.shape != shape
            || entry.len != numel as u64
            || entry.offset != offset
        {
            return Err(integrity(
                PREFIX,
                format!(
                    "manifest entry {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, name, shape
                ),
            ));
        }
        offset += 4 * entry.len;
    }
    if header.payload_bytes != offset {
        return Err(integrity(
            PREFIX,
            "payload size in header disagrees with the manifest",
        ));
    }
    let payload = &bytes[payload_start..];
    if (payload.len() as u64) < offset {
        return Err(integrity(
            bytes.len(),
            format!(
                "payload truncated: {} of {offset} bytes present",
                payload.len()
            ),
        ));
    }
    if payload.len() as u64 > offset {
        return Err(integrity(
            payload_start + offset as usize,
            "trailing bytes after the payload",
        ));
    }
    let mut entries = header.tensors.iter();
    let params = Params::build(&header.model, |_, shape| {
        let e = entries.next().expect("manifest entry");
        let start = e.offset as usize;
        let data = payload[start..start + 4 * e.len as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    })?;
    Ok(Checkpoint {
        params,
        model: header.model,
        train: header.train,
        step: header.step,
    })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    model: &ModelConfig,
    train: Option<&TrainConfig>,
    step: u64,
) -> Result<()> {
    fs::write(path, encode_checkpoint(params, model, train, step)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
