//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then every tensor's `f64` values in little-endian order. Offsets and
//! lengths in the header are byte positions within the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConnectivityMode, Layout, Model, ModelConfig, ParamSet};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FSKPCKPT";
pub const FORMAT: &str = "farskip-checkpoint";
pub const VERSION: u32 = 1;
const MAX_HEADER: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub modes: Vec<ConnectivityMode>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (training step, source checkpoint, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(model: &Model, meta: serde_json::Value) -> Result<Vec<u8>> {
    let layout = model.layout();
    let mut tensors = Vec::with_capacity(layout.len());
    let mut offset = 0u64;
    for ((name, shape), t) in layout.specs.iter().zip(&model.params.tensors) {
        let length = (t.len() * 8) as u64;
        tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset, length });
        offset += length;
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        modes: model.modes.clone(),
        tensors,
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| crate::Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &model.params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates the header without touching the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        bail!(Format, "not a checkpoint: bad magic");
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER || header_len > (bytes.len() - 16) as u64 {
        bail!(Format, "header length {header_len} exceeds file size");
    }
    let end = 16 + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| crate::Error::Format(format!("header: {e}")))?;
    if header.format != FORMAT {
        bail!(Format, "unknown format {:?}", header.format);
    }
    if header.version != VERSION {
        bail!(Format, "unsupported version {}", header.version);
    }
    Ok((header, &bytes[end..]))
}

pub fn decode(bytes: &[u8]) -> Result<(Model, serde_json::Value)> {
    let (header, payload) = decode_header(bytes)?;
    header
        .config
        .validate()
        .map_err(|e| crate::Error::Format(format!("config: {e}")))?;
    let layout = Layout::new(&header.config);
    if header.tensors.len() != layout.len() {
        bail!(Format, "{} tensors, layout expects {}", header.tensors.len(), layout.len());
    }
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(layout.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&layout.specs) {
        if &entry.name != name || &entry.shape != shape {
            bail!(Format, "tensor {:?} {:?} where {name:?} {shape:?} expected", entry.name, entry.shape);
        }
        let numel: usize = shape.iter().product();
        if entry.offset != expected_offset || entry.length != (numel as u64) * 8 {
            bail!(Format, "tensor {name} has inconsistent offset/length");
        }
        let start = entry.offset as usize;
        let Some(raw) = payload.get(start..start + entry.length as usize) else {
            bail!(Format, "payload truncated in tensor {name}");
        };
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
        expected_offset += entry.length;
    }
    if payload.len() as u64 != expected_offset {
        bail!(Format, "{} trailing payload bytes", payload.len() as u64 - expected_offset);
    }
    let model = Model::from_parts(header.config, header.modes, ParamSet { tensors })
        .map_err(|e| crate::Error::Format(e.to_string()))?;
    Ok((model, header.meta))
}

pub fn save(path: &Path, model: &Model, meta: serde_json::Value) -> Result<()> {
    fs::write(path, encode(model, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, serde_json::Value)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::tests::tiny;

    #[test]
    fn round_trip_is_byte_exact() {
        let m = Model::new(tiny()).unwrap();
        let bytes = encode(&m, serde_json::json!({"step": 3})).unwrap();
        let (back, meta) = decode(&bytes).unwrap();
        assert!(back.params.bit_eq(&m.params));
        assert_eq!(meta["step"], 3);
        assert_eq!(encode(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::new(tiny()).unwrap();
        let bytes = encode(&m, serde_json::Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut huge = bytes;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&huge).is_err());
    }
}
