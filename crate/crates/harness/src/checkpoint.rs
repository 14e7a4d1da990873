//! Checkpoint files.
//!
//! Layout: the 8-byte magic, a `u32` format version, a `u64` manifest length,
//! the JSON manifest, then every parameter as contiguous little-endian `f32`
//! in manifest order. Offsets and lengths count `f32` elements.

use std::path::Path;

use inavit::model::{InAViT, InAViTConfig};
use inavit::numerics::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{io_err, json_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"INAVITCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: InAViTConfig,
    pub config_hash: String,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: InAViTConfig,
    pub step: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(config: InAViTConfig, step: u64, params: ParamStore<f32>) -> Self {
        Self { config, step, params }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
                offset += t.numel();
                e
            })
            .collect();
        let manifest = CheckpointManifest {
            version: VERSION,
            config: self.config.clone(),
            config_hash: self.config_hash(),
            step: self.step,
            params,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a checkpoint: names and shapes against the
    /// architecture the manifest's config describes, then offsets, then the
    /// payload length.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(HarnessError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(HarnessError::Version(version));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| HarnessError::Format("truncated manifest".into()))?;
        let manifest: CheckpointManifest = serde_json::from_slice(body).map_err(json_err("checkpoint manifest"))?;
        if manifest.version != VERSION {
            return Err(HarnessError::Version(manifest.version));
        }
        if manifest.config_hash != config_hash(&manifest.config) {
            return Err(HarnessError::Format("config hash does not match config".into()));
        }
        let model = InAViT::new(manifest.config.clone())?;
        let reference: ParamStore<f32> = model.init_params(0)?;
        for e in &manifest.params {
            let expected = reference.get(&e.name).map_err(|_| HarnessError::UnknownParam(e.name.clone()))?;
            if expected.shape() != e.shape.as_slice() {
                return Err(HarnessError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: expected.shape().to_vec(),
                    found: e.shape.clone(),
                });
            }
        }
        if let Some(missing) = reference.names().find(|n| !manifest.params.iter().any(|e| e.name == *n)) {
            return Err(HarnessError::MissingParam(missing.to_string()));
        }
        let mut total = 0;
        for e in &manifest.params {
            if e.offset != total {
                return Err(HarnessError::Format(format!("`{}` at offset {}, expected {total}", e.name, e.offset)));
            }
            total += e.shape.iter().product::<usize>();
        }
        let payload = &bytes[20 + len..];
        if payload.len() < 4 * total {
            return Err(HarnessError::TruncatedPayload { expected: 4 * total, found: payload.len() });
        }
        if payload.len() > 4 * total {
            return Err(HarnessError::Format(format!("{} trailing bytes", payload.len() - 4 * total)));
        }
        let mut params = ParamStore::new();
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let data = payload[4 * e.offset..4 * (e.offset + n)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { config: manifest.config, step: manifest.step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }
}
