//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, a JSON header
//! (model kind, metadata, tensor table), then every tensor as little-endian
//! `f32` in table order. Writes go through a sibling temp file and a rename,
//! so a crash never leaves a truncated checkpoint behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::predictor::{Predictor, PredictorConfig};

pub const MAGIC: &[u8; 8] = b"LBMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

pub const KIND_CODEC: &str = "codec";
pub const KIND_PREDICTOR: &str = "predictor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub version: u32,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_checkpoint<M: Serialize>(kind: &str, metadata: &M, params: &[&Param]) -> Result<Vec<u8>> {
    let metadata = serde_json::to_value(metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header = CheckpointHeader {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        metadata,
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                frozen: p.frozen,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n_values: usize = params.iter().map(|p| p.value.len()).sum();
    let mut out = Vec::with_capacity(12 + json.len() + 4 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        if let Some(bad) = p.value.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {} contains {bad}", p.name)));
        }
        for v in &p.value {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Param>)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.version)));
    }
    let mut offset = 12 + hlen;
    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", entry.name)))?;
        offset += 4 * n;
        let value = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut p = Param::zeros(entry.name.clone(), &entry.shape);
        p.value = value;
        p.frozen = entry.frozen;
        params.push(p);
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((header, params))
}

pub fn save<M: Serialize>(path: impl AsRef<Path>, kind: &str, metadata: &M, params: &[&Param]) -> Result<()> {
    write_atomic(path, &encode_checkpoint(kind, metadata, params)?)
}

/// Reads a checkpoint and checks its kind.
pub fn load<M: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<(M, Vec<Param>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (header, params) = decode_checkpoint(&bytes)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            header.kind
        )));
    }
    let meta = serde_json::from_value(header.metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((meta, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodecMeta {
    config: CodecConfig,
    scale: f64,
}

pub fn save_codec(path: impl AsRef<Path>, codec: &Codec) -> Result<()> {
    let meta = CodecMeta {
        config: codec.config().clone(),
        scale: codec.scale(),
    };
    save(path, KIND_CODEC, &meta, &codec.params())
}

pub fn load_codec(path: impl AsRef<Path>) -> Result<Codec> {
    let (meta, params): (CodecMeta, _) = load(path, KIND_CODEC)?;
    let mut codec = Codec::new(meta.config, 0)?;
    codec.load_params(&params)?;
    codec.set_scale(meta.scale)?;
    Ok(codec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictorMeta<M> {
    config: PredictorConfig,
    extra: M,
}

/// Saves a predictor together with caller-defined metadata (schedule, stage settings).
pub fn save_predictor<M: Serialize>(path: impl AsRef<Path>, predictor: &Predictor, extra: &M) -> Result<()> {
    let meta = PredictorMeta {
        config: *predictor.config(),
        extra,
    };
    save(path, KIND_PREDICTOR, &meta, &predictor.params())
}

pub fn load_predictor<M: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(Predictor, M)> {
    let (meta, params): (PredictorMeta<M>, _) = load(path, KIND_PREDICTOR)?;
    let mut predictor = Predictor::new(meta.config, 0)?;
    predictor.load_params(&params)?;
    Ok((predictor, meta.extra))
}
