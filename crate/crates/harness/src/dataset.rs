//! Dataset directories: `manifest.json`, one raw tensor file per episode under
//! `clips/` and one JSON-lines box file per episode under `boxes/`.

use std::io::Write;
use std::path::{Path, PathBuf};

use inavit::model::{ClipInput, InAViTConfig};
use inavit::numerics::Tensor;
use inavit::roi::BoundingBox;
use inavit::synthdata::{Episode, Manifest, Split};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{io_err, json_err, HarnessError, Result};

/// Magic bytes of a raw tensor file.
pub const TENSOR_MAGIC: &[u8; 8] = b"INAVTNSR";

/// Raw tensor file: magic, `u32` rank, `u64` extents, then `f32` values, all little-endian.
pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: &str| HarnessError::Dataset(format!("tensor file: {m}"));
    if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().expect("8 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad(&format!("{} payload bytes for shape {shape:?}", bytes.len() - header)));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(shape, data)?)
}

/// One JSON object per detection, frames in order.
pub fn encode_boxes(frames: &[Vec<BoundingBox>]) -> Vec<u8> {
    let mut out = Vec::new();
    for b in frames.iter().flatten() {
        serde_json::to_writer(&mut out, b).expect("boxes serialize");
        out.push(b'\n');
    }
    out
}

pub fn decode_boxes(text: &str, frames: usize) -> Result<Vec<Vec<BoundingBox>>> {
    let mut out = vec![Vec::new(); frames];
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let b: BoundingBox = serde_json::from_str(line).map_err(json_err(format!("box line {}", i + 1)))?;
        let slot = out
            .get_mut(b.frame)
            .ok_or_else(|| HarnessError::Dataset(format!("box line {} has frame {} of {frames}", i + 1, b.frame)))?;
        slot.push(b);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredEpisode {
    pub seed: u64,
    pub label: usize,
    pub split: Split,
    pub clip: Tensor<f32>,
    pub detections: Vec<Vec<BoundingBox>>,
}

/// A loaded dataset and its content hash.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<StoredEpisode>,
    /// Hex SHA-256 over the manifest and every episode file.
    pub hash: String,
}

fn clip_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("clips").join(format!("{seed:06}.tensor"))
}

fn boxes_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join("boxes").join(format!("{seed:06}.jsonl"))
}

fn manifest_bytes(m: &Manifest) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(m).expect("manifest serializes");
    v.push(b'\n');
    v
}

fn content_hash(manifest: &[u8], files: impl Iterator<Item = (Vec<u8>, Vec<u8>)>) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    for (clip, boxes) in files {
        h.update(Sha256::digest(&clip));
        h.update(Sha256::digest(&boxes));
    }
    hex::encode(h.finalize())
}

impl Dataset {
    pub fn from_episodes(episodes: Vec<Episode>, manifest: Manifest) -> Self {
        let stored: Vec<StoredEpisode> = episodes
            .into_iter()
            .map(|e| StoredEpisode {
                seed: e.seed,
                label: e.label,
                split: Split::of_seed(e.seed),
                clip: e.clip,
                detections: e.detections,
            })
            .collect();
        let hash = content_hash(
            &manifest_bytes(&manifest),
            stored.iter().map(|e| (encode_tensor(&e.clip), encode_boxes(&e.detections))),
        );
        Self { manifest, episodes: stored, hash }
    }

    /// Writes the directory layout; existing files are overwritten.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["clips", "boxes"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(io_err(dir.join(sub)))?;
        }
        let manifest = dir.join("manifest.json");
        std::fs::write(&manifest, manifest_bytes(&self.manifest)).map_err(io_err(&manifest))?;
        for e in &self.episodes {
            let p = clip_path(dir, e.seed);
            std::fs::write(&p, encode_tensor(&e.clip)).map_err(io_err(&p))?;
            let p = boxes_path(dir, e.seed);
            let mut f = std::fs::File::create(&p).map_err(io_err(&p))?;
            f.write_all(&encode_boxes(&e.detections)).map_err(io_err(&p))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let mbytes = std::fs::read(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_slice(&mbytes).map_err(json_err(mpath.display().to_string()))?;
        let frames = manifest.config.frames;
        let raw: Vec<(Vec<u8>, Vec<u8>)> = manifest
            .episodes
            .iter()
            .map(|r| {
                let (c, b) = (clip_path(dir, r.seed), boxes_path(dir, r.seed));
                Ok((std::fs::read(&c).map_err(io_err(&c))?, std::fs::read(&b).map_err(io_err(&b))?))
            })
            .collect::<Result<_>>()?;
        let episodes = manifest
            .episodes
            .iter()
            .zip(&raw)
            .map(|(r, (clip, boxes))| {
                let text = std::str::from_utf8(boxes)
                    .map_err(|_| HarnessError::Dataset(format!("episode {}: boxes are not UTF-8", r.seed)))?;
                Ok(StoredEpisode {
                    seed: r.seed,
                    label: r.label,
                    split: r.split,
                    clip: decode_tensor(clip)?,
                    detections: decode_boxes(text, frames)?,
                })
            })
            .collect::<Result<_>>()?;
        let hash = content_hash(&mbytes, raw.into_iter());
        Ok(Self { manifest, episodes, hash })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &StoredEpisode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn episode(&self, seed: u64) -> Option<&StoredEpisode> {
        self.episodes.iter().find(|e| e.seed == seed)
    }

    /// Model inputs and labels of one split, in manifest order.
    pub fn examples(&self, cfg: &InAViTConfig, split: Split) -> Result<Vec<Example>> {
        let eps: Vec<&StoredEpisode> = self.split(split).collect();
        eps.par_iter().map(|e| Example::new(e, cfg)).collect()
    }
}

/// A prepared model input with its label.
#[derive(Clone, Debug)]
pub struct Example {
    pub seed: u64,
    pub input: ClipInput<f32>,
    pub label: usize,
}

impl Example {
    pub fn new(e: &StoredEpisode, cfg: &InAViTConfig) -> Result<Self> {
        if e.label >= cfg.classes {
            return Err(HarnessError::Dataset(format!("episode {} label {} >= {} classes", e.seed, e.label, cfg.classes)));
        }
        Ok(Self { seed: e.seed, input: ClipInput::prepare(&e.clip, &e.detections, cfg)?, label: e.label })
    }
}
