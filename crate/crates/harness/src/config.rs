//! Run configuration: one JSON document plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use inavit::model::InAViTConfig;
use inavit::numerics::AdamW;
use inavit::synthdata::{Manifest, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_err, json_err, HarnessError, Result};

/// Learning-rate schedule after the linear warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory; drives initialization and batch order.
    pub seed: Option<u64>,
    pub model: InAViTConfig,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub steps: u64,
    pub batch_size: usize,
    /// Evaluate on the eval split every this many steps; 0 only at the end.
    pub eval_every: u64,
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Generator settings for `gen-data`.
    pub data: SynthConfig,
    /// Episodes written by `gen-data`.
    pub episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: InAViTConfig::default(),
            optimizer: AdamW { lr: 1e-3, ..AdamW::default() },
            schedule: Schedule::Cosine,
            warmup_steps: 100,
            steps: 2000,
            batch_size: 8,
            eval_every: 0,
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs/default"),
            data: SynthConfig::default(),
            episodes: 1024,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults) and applies `key=value`
    /// overrides. Keys are dotted paths; values parse as JSON and fall back
    /// to plain strings.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                serde_json::from_str(&text).map_err(json_err(p.display().to_string()))?
            }
            None => Value::Object(Default::default()),
        };
        for s in sets {
            apply_override(&mut doc, s)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(json_err("run config"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(HarnessError::Config(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| HarnessError::Config("seed is mandatory (set `seed` or --set seed=N)".into()))
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.optimizer.lr;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let progress = (step - self.warmup_steps) as f64 / span;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    }

    /// The model configuration must fit the dataset's frames and classes.
    pub fn check_dataset(&self, manifest: &Manifest) -> Result<()> {
        let (t, d) = (&self.model.tokenizer, &manifest.config);
        if (t.frames, t.height, t.width) != (d.frames, d.height, d.width) {
            return Err(HarnessError::Config(format!(
                "model expects {}x{}x{} clips, dataset has {}x{}x{}",
                t.frames, t.height, t.width, d.frames, d.height, d.width
            )));
        }
        if self.model.classes < d.object_types {
            return Err(HarnessError::Config(format!(
                "{} classes cannot cover {} object types",
                self.model.classes, d.object_types
            )));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the model configuration's JSON form.
pub fn config_hash(model: &InAViTConfig) -> String {
    let bytes = serde_json::to_vec(model).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(HarnessError::Config(format!("empty path segment in `{key}`")));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
