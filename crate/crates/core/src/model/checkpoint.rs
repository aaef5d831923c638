//! Versioned checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ZFCK" | u32 format_version | u64 header_len | header JSON
//!        | tensor payloads (f32) | u64 XXH64 of every preceding byte
//! ```
//!
//! The header holds the model kind, the config blob, preprocessing stats,
//! seed, training metadata and a tensor directory (name, shape, dtype,
//! byte offset relative to the payload start).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::data::{Detector, PreprocStats};
use crate::numerics::{DType, ParamStore, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    UnetPixel,
    UnetLatent,
    Vae,
    MlpChannels,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainMetadata {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_wasserstein: Option<f64>,
    /// Free-form extras (hyperparameters, loss of the selected epoch, ...).
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub detector: Detector,
    pub config: serde_json::Value,
    pub params: ParamStore,
    pub preproc: Option<PreprocStats>,
    pub seed: u64,
    pub metadata: TrainMetadata,
}

impl ModelCheckpoint {
    pub fn new(model_kind: ModelKind, detector: Detector, config: &impl Serialize, params: ParamStore, seed: u64) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            model_kind,
            detector,
            config: serde_json::to_value(config)?,
            params,
            preproc: None,
            seed,
            metadata: TrainMetadata::default(),
        })
    }

    pub fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.model_kind != kind {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {:?}, expected {kind:?}",
                self.model_kind
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_kind: ModelKind,
    detector: Detector,
    config: serde_json::Value,
    preproc: Option<PreprocStats>,
    seed: u64,
    metadata: TrainMetadata,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = ckpt
        .params
        .iter()
        .map(|(_, name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: t.dtype(),
                offset,
            };
            offset += 4 * t.numel() as u64;
            e
        })
        .collect();
    let header = Header {
        model_kind: ckpt.model_kind,
        detector: ckpt.detector,
        config: ckpt.config.clone(),
        preproc: ckpt.preproc.clone(),
        seed: ckpt.seed,
        metadata: ckpt.metadata.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(24 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&ckpt.format_version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in ckpt.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = xxh64(&out, 0);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 24 {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if xxh64(body, 0) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(Error::Integrity("checkpoint digest mismatch".into()));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[16..payload_start])?;
    let payload = &body[payload_start..];
    let mut params = ParamStore::new();
    let mut expected = 0u64;
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.offset != expected {
            return Err(Error::Format(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        let start = e.offset as usize;
        let end = start + 4 * numel;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past the payload", e.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut t = Tensor::new(e.shape, data)?;
        t.set_dtype(e.dtype);
        params.add(e.name, t);
        expected = end as u64;
    }
    if expected as usize != payload.len() {
        return Err(Error::Format("trailing bytes after the tensor payload".into()));
    }
    Ok(ModelCheckpoint {
        format_version: version,
        model_kind: header.model_kind,
        detector: header.detector,
        config: header.config,
        params,
        preproc: header.preproc,
        seed: header.seed,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &ModelCheckpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
