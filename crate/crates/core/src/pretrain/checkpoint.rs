//! Binary checkpoint: magic, little-endian header length, JSON header, then
//! every tensor as little-endian f64 in header order.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};

const MAGIC: &[u8; 8] = b"FLXMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: u8,
    step: usize,
    config_hash: String,
    feature_config_hash: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Model state as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Last completed training stage (1 or 2; 0 for an untrained model).
    pub stage: u8,
    pub step: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_layout(&self.config)?;
        let header = Header {
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            step: self.step,
            config_hash: self.config.hash(),
            feature_config_hash: self.config.features.hash(),
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        if header.config_hash != header.config.hash() {
            return Err(bad("model configuration hash does not match the stored configuration"));
        }
        if header.feature_config_hash != header.config.features.hash() {
            return Err(bad("feature configuration hash does not match the stored configuration"));
        }
        let mut offset = 16 + hlen;
        let mut tensors = std::collections::BTreeMap::new();
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * len)
                .ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * len;
            tensors.insert(entry.name, Tensor::new(entry.shape, data));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let params = ParamStore::from_tensors(tensors);
        params.check_layout(&header.config)?;
        Ok(Self {
            config: header.config,
            params,
            stage: header.stage,
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => Error::Checkpoint(format!("no checkpoint at {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Header fields as JSON, for inspection.
    pub fn describe(&self) -> serde_json::Value {
        let tensors: Vec<_> = self
            .params
            .iter()
            .map(|(n, t)| serde_json::json!({"name": n, "shape": t.shape()}))
            .collect();
        serde_json::json!({
            "version": CHECKPOINT_VERSION,
            "stage": self.stage,
            "step": self.step,
            "config_hash": self.config.hash(),
            "feature_config_hash": self.config.features.hash(),
            "config": self.config,
            "num_tensors": self.params.len(),
            "num_parameters": self.params.num_scalars(),
            "tensors": tensors,
        })
    }
}
