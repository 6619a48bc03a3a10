//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64`s.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"HOIUCKPT";
const FORMAT: &str = "hoiu.ckpt/v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
    total: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = Entry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format: FORMAT.to_string(),
            meta: self.meta.clone(),
            tensors,
            total: offset,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(len).ok_or_else(|| bad("header length overflow"))?;
        if bytes.len() < body_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        if header.format != FORMAT {
            return Err(bad("unknown format"));
        }
        let body = &bytes[body_start..];
        if body.len() != 8 * header.total {
            return Err(bad("payload length does not match header"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = e.offset.checked_add(n).filter(|&end| end <= values.len());
                let end = end.ok_or_else(|| bad("tensor outside payload"))?;
                Ok(NamedTensor {
                    name: e.name,
                    shape: e.shape,
                    data: values[e.offset..end].to_vec(),
                })
            })
            .collect::<Result<_, CheckpointError>>()?;
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

impl Model {
    /// Parameters as named tensors with the config stored under `meta.model`.
    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Checkpoint {
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["model"] = serde_json::to_value(self.config()).expect("config serializes");
        let tensors = self
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.clone(),
            })
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CheckpointError> {
        let cfg: ModelConfig = serde_json::from_value(
            ckpt.meta
                .get("model")
                .cloned()
                .ok_or_else(|| CheckpointError::Format("no model config".into()))?,
        )?;
        let mut model = Model::new(cfg, 0)?;
        for p in model.params_mut().iter_mut() {
            let t = ckpt
                .tensor(&p.name)
                .ok_or_else(|| CheckpointError::Format(format!("missing tensor {}", p.name)))?;
            if t.shape != p.shape {
                return Err(CheckpointError::Format(format!("shape mismatch for {}", p.name)));
            }
            p.data.clone_from(&t.data);
        }
        Ok(model)
    }
}
