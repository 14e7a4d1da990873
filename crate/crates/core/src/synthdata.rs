//! Procedural hand-object anticipation episodes.
//!
//! A white hand glyph travels in a straight line toward a colored target
//! object while distractors drift. The clip stops `gap` frames before the hand
//! first touches the target; the label is the target's type.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::roi::{BoundingBox, BoxKind};

/// RGB per object type; the hand is white.
pub const PALETTE: [[f32; 3]; 12] = [
    [1.0, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.15, 0.3, 1.0],
    [1.0, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
    [1.0, 0.55, 0.0],
    [0.55, 0.25, 0.05],
    [0.5, 0.5, 0.5],
    [0.6, 1.0, 0.6],
    [0.45, 0.0, 0.6],
    [0.0, 0.45, 0.3],
];
pub const HAND_COLOR: [f32; 3] = [1.0, 1.0, 1.0];

const MAX_ATTEMPTS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Observed frames.
    pub frames: usize,
    /// Frames between the last observed frame and first contact.
    pub gap: usize,
    pub object_types: usize,
    pub distractors: usize,
    /// Side of the square hand and object glyphs in pixels.
    pub glyph: f32,
    /// Mean hand speed in pixels per frame.
    pub speed: f32,
    /// Largest distractor drift per frame and axis.
    pub drift: f32,
    /// Extra distance every distractor keeps beyond the target's distance to
    /// the hand at the last observed frame.
    pub clearance: f32,
    /// Standard deviation of the emitted box coordinates.
    pub jitter: f32,
    /// Standard deviation of the background noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 8,
            gap: 4,
            object_types: 8,
            distractors: 3,
            glyph: 6.0,
            speed: 0.3,
            drift: 0.3,
            clearance: 9.0,
            jitter: 0.5,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.object_types < 2 || self.object_types > PALETTE.len() {
            return Err(Error::Config(format!("object types must lie in 2..={}", PALETTE.len())));
        }
        if self.frames == 0 {
            return Err(Error::Config("need at least one observed frame".into()));
        }
        if self.gap == 0 {
            return Err(Error::Config("the observed window must end before contact".into()));
        }
        if !(self.glyph > 0.0) || 2.0 * self.glyph >= self.width.min(self.height) as f32 {
            return Err(Error::Config(format!("glyph {} does not fit a {}x{} frame", self.glyph, self.width, self.height)));
        }
        if !(self.speed > 0.0) || self.jitter < 0.0 || self.noise < 0.0 || self.drift < 0.0 || self.clearance < 0.0 {
            return Err(Error::Config("speed must be positive; jitter, noise, drift and clearance nonnegative".into()));
        }
        Ok(())
    }
}

/// True trajectory of one object over the observed frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub track_id: u64,
    pub type_id: usize,
    pub path: Vec<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub seed: u64,
    /// `frames x H x W x 3`.
    pub clip: Tensor<f32>,
    /// Emitted (jittered) detections per frame: the hand first, then objects.
    pub detections: Vec<Vec<BoundingBox>>,
    pub hand: Vec<BoundingBox>,
    pub objects: Vec<ObjectTrack>,
    pub label: usize,
    pub gap: usize,
}

fn square(frame: usize, kind: BoxKind, c: (f32, f32), side: f32) -> BoundingBox {
    let h = 0.5 * side;
    BoundingBox::new(frame, kind, c.0 - h, c.1 - h, c.0 + h, c.1 + h)
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.intersection(b) > 0.0
}

fn inside(b: &BoundingBox, width: f32, height: f32) -> bool {
    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= width && b.y2 <= height
}

fn shifted(b: &BoundingBox, dx: f32, dy: f32) -> BoundingBox {
    BoundingBox { x1: b.x1 + dx, y1: b.y1 + dy, x2: b.x2 + dx, y2: b.y2 + dy, ..b.clone() }
}

/// Constant-velocity extrapolation `k` frames past the end of `path`.
fn extrapolate(path: &[BoundingBox], k: usize) -> BoundingBox {
    let last = &path[path.len() - 1];
    let (vx, vy) = match path.len() {
        1 => (0.0, 0.0),
        n => {
            let prev = &path[n - 2];
            (last.x1 - prev.x1, last.y1 - prev.y1)
        }
    };
    shifted(last, vx * k as f32, vy * k as f32)
}

/// First contact under constant-velocity motion from the last observed frame:
/// `(steps ahead, object index)`. Ties at the same step go to the object
/// whose center is closest to the hand.
pub fn first_contact(hand: &[BoundingBox], objects: &[ObjectTrack], horizon: usize) -> Option<(usize, usize)> {
    if hand.is_empty() {
        return None;
    }
    (0..=horizon).find_map(|k| {
        let h = extrapolate(hand, k);
        objects
            .iter()
            .enumerate()
            .filter(|(_, o)| !o.path.is_empty())
            .map(|(i, o)| (i, extrapolate(&o.path, k)))
            .filter(|(_, b)| overlaps(&h, b))
            .min_by(|a, b| a.1.center_distance(&h).total_cmp(&b.1.center_distance(&h)).then(a.0.cmp(&b.0)))
            .map(|(i, _)| (k, i))
    })
}

/// Type of the first object the hand touches when the observed motion is
/// continued; errors when nothing is touched within `4 * gap` frames.
pub fn label_of(hand: &[BoundingBox], objects: &[ObjectTrack], gap: usize) -> Result<usize> {
    first_contact(hand, objects, 4 * gap.max(1))
        .map(|(_, i)| objects[i].type_id)
        .ok_or_else(|| Error::DegenerateEpisode(format!("no contact within {} frames", 4 * gap.max(1))))
}

fn render(cfg: &SynthConfig, hand: &[BoundingBox], objects: &[ObjectTrack], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = vec![0f32; cfg.frames * h * w * 3];
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        for x in &mut data {
            *x = normal.sample(rng);
        }
    }
    let mut paint = |f: usize, b: &BoundingBox, color: [f32; 3]| {
        for y in 0..h {
            let cy = y as f32 + 0.5;
            if cy < b.y1 || cy >= b.y2 {
                continue;
            }
            for x in 0..w {
                let cx = x as f32 + 0.5;
                if cx >= b.x1 && cx < b.x2 {
                    let base = ((f * h + y) * w + x) * 3;
                    data[base..base + 3].copy_from_slice(&color);
                }
            }
        }
    };
    for f in 0..cfg.frames {
        for o in objects {
            paint(f, &o.path[f], PALETTE[o.type_id]);
        }
        paint(f, &hand[f], HAND_COLOR);
    }
    Tensor::new(vec![cfg.frames, h, w, 3], data)
}

/// One attempt at laying out trajectories; `None` when the draw is infeasible.
fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<(Vec<BoundingBox>, Vec<ObjectTrack>)> {
    let (wf, hf, g) = (cfg.width as f32, cfg.height as f32, cfg.glyph);
    let contact = cfg.frames - 1 + cfg.gap;
    let horizon = cfg.frames - 1 + 4 * cfg.gap;
    let half = 0.5 * g;
    let center = |rng: &mut ChaCha8Rng| (rng.random_range(half..wf - half), rng.random_range(half..hf - half));

    let target_type = rng.random_range(0..cfg.object_types);
    let pt = center(rng);
    let theta: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let speed = cfg.speed * rng.random_range(0.75..1.25);
    let (ux, uy) = (theta.cos(), theta.sin());
    // boxes first overlap when the hand is this far from the target along u
    let reach = g / ux.abs().max(uy.abs());
    let hc = (pt.0 - ux * (reach - 0.5 * speed), pt.1 - uy * (reach - 0.5 * speed));
    let hand_at = |f: usize| {
        let back = speed * (contact as f32 - f as f32);
        (hc.0 - ux * back, hc.1 - uy * back)
    };
    let hand: Vec<BoundingBox> = (0..cfg.frames).map(|f| square(f, BoxKind::Hand, hand_at(f), g)).collect();
    if !hand.iter().all(|b| inside(b, wf, hf)) {
        return None;
    }
    let hand_future: Vec<BoundingBox> = (0..=horizon).map(|f| square(f, BoxKind::Hand, hand_at(f), g)).collect();

    let mut objects = vec![ObjectTrack {
        track_id: 1,
        type_id: target_type,
        path: (0..cfg.frames).map(|f| square(f, BoxKind::Object, pt, g)).collect(),
    }];
    for i in 0..cfg.distractors {
        let mut placed = None;
        for _ in 0..50 {
            let p0 = center(rng);
            let v = (rng.random_range(-cfg.drift..=cfg.drift), rng.random_range(-cfg.drift..=cfg.drift));
            let at = |f: usize| (p0.0 + v.0 * f as f32, p0.1 + v.1 * f as f32);
            let path: Vec<BoundingBox> = (0..cfg.frames).map(|f| square(f, BoxKind::Object, at(f), g)).collect();
            if !path.iter().all(|b| inside(b, wf, hf)) {
                continue;
            }
            // keep clear of the hand's path and of the other objects
            let clear_hand = (0..=horizon).all(|f| {
                let b = square(f, BoxKind::Object, at(f), g + 2.0);
                !overlaps(&b, &hand_future[f])
            });
            let clear_objects = objects.iter().all(|o| {
                (0..cfg.frames).all(|f| o.path[f].center_distance(&path[f]) >= g + 2.0)
            });
            let last = cfg.frames - 1;
            let target_distance = objects[0].path[last].center_distance(&hand[last]);
            let behind_target = path[last].center_distance(&hand[last]) >= target_distance + cfg.clearance;
            if clear_hand && clear_objects && behind_target {
                let type_id = (target_type + rng.random_range(1..cfg.object_types)) % cfg.object_types;
                placed = Some(ObjectTrack { track_id: i as u64 + 2, type_id, path });
                break;
            }
        }
        objects.push(placed?);
    }
    Some((hand, objects))
}

/// Deterministic episode for `(cfg, seed)`.
pub fn generate_episode(cfg: &SynthConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let Some((hand, objects)) = layout(cfg, &mut rng) else {
            continue;
        };
        // the motion model must reproduce the intended contact exactly
        match first_contact(&hand, &objects, 4 * cfg.gap) {
            Some((k, 0)) if k == cfg.gap => {}
            _ => continue,
        }
        let label = label_of(&hand, &objects, cfg.gap)?;
        let clip = render(cfg, &hand, &objects, &mut rng)?;
        let detections = emit(cfg, &hand, &objects, &mut rng)?;
        return Ok(Episode { seed, clip, detections, hand, objects, label, gap: cfg.gap });
    }
    Err(Error::DegenerateEpisode(format!("seed {seed}: no feasible layout")))
}

fn emit(cfg: &SynthConfig, hand: &[BoundingBox], objects: &[ObjectTrack], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<BoundingBox>>> {
    let (wf, hf) = (cfg.width as f32, cfg.height as f32);
    let normal = Normal::new(0.0f32, cfg.jitter.max(f32::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let mut jitter = |b: &BoundingBox, id: u64| {
        let mut out = b.clone().with_track(id);
        if cfg.jitter > 0.0 {
            out.x1 += normal.sample(rng);
            out.y1 += normal.sample(rng);
            out.x2 += normal.sample(rng);
            out.y2 += normal.sample(rng);
            if out.x2 < out.x1 {
                std::mem::swap(&mut out.x1, &mut out.x2);
            }
            if out.y2 < out.y1 {
                std::mem::swap(&mut out.y1, &mut out.y2);
            }
            out = out.clamped(wf, hf);
        }
        out
    };
    Ok((0..cfg.frames)
        .map(|f| {
            let mut dets = vec![jitter(&hand[f], 0)];
            dets.extend(objects.iter().map(|o| jitter(&o.path[f], o.track_id)));
            dets
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    /// Even seeds train, odd seeds evaluate.
    pub fn of_seed(seed: u64) -> Self {
        if seed.is_multiple_of(2) {
            Split::Train
        } else {
            Split::Eval
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub label: usize,
    pub split: Split,
    pub object_types: BTreeMap<u64, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub episodes: Vec<EpisodeRecord>,
    /// Per split, count per class (`object_types` entries).
    pub class_counts: BTreeMap<String, Vec<usize>>,
    pub skipped_seeds: Vec<u64>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter().filter(move |e| e.split == split)
    }
}

/// `n` episodes from consecutive seeds starting at `seed`, skipping degenerate seeds.
pub fn generate_dataset(cfg: &SynthConfig, n: usize, seed: u64) -> Result<(Vec<Episode>, Manifest)> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut episodes = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    let mut s = seed;
    while episodes.len() < n {
        match generate_episode(cfg, s) {
            Ok(e) => episodes.push(e),
            Err(Error::DegenerateEpisode(_)) => skipped.push(s),
            Err(e) => return Err(e),
        }
        s += 1;
    }
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for split in ["train", "eval"] {
        counts.insert(split.into(), vec![0; cfg.object_types]);
    }
    let records = episodes
        .iter()
        .map(|e| {
            let split = Split::of_seed(e.seed);
            let key = if split == Split::Train { "train" } else { "eval" };
            counts.get_mut(key).expect("both splits")[e.label] += 1;
            EpisodeRecord {
                seed: e.seed,
                label: e.label,
                split,
                object_types: e.objects.iter().map(|o| (o.track_id, o.type_id)).collect(),
            }
        })
        .collect();
    Ok((episodes, Manifest { config: cfg.clone(), episodes: records, class_counts: counts, skipped_seeds: skipped }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(type_id: usize, path: Vec<BoundingBox>) -> ObjectTrack {
        ObjectTrack { track_id: type_id as u64 + 1, type_id, path }
    }

    fn hand_path(points: &[(f32, f32)]) -> Vec<BoundingBox> {
        points.iter().enumerate().map(|(f, &c)| square(f, BoxKind::Hand, c, 4.0)).collect()
    }

    fn still(type_id: usize, c: (f32, f32), n: usize) -> ObjectTrack {
        track(type_id, (0..n).map(|f| square(f, BoxKind::Object, c, 4.0)).collect())
    }

    #[test]
    fn overlapping_at_end_of_observation() {
        let hand = hand_path(&[(0.0, 0.0), (10.0, 10.0)]);
        let objs = vec![still(5, (11.0, 11.0), 2), still(2, (30.0, 30.0), 2)];
        assert_eq!(label_of(&hand, &objs, 4).unwrap(), 5);
    }

    #[test]
    fn single_object() {
        let hand = hand_path(&[(0.0, 0.0), (2.0, 0.0)]);
        let objs = vec![still(6, (12.0, 0.0), 2)];
        assert_eq!(label_of(&hand, &objs, 4).unwrap(), 6);
    }

    #[test]
    fn aimed_at_type_three() {
        // hand box [2k, 2k+4] first overlaps [18, 22] strictly at k = 8
        let hand = hand_path(&[(0.0, 10.0), (2.0, 10.0)]);
        let objs = vec![still(1, (10.0, 30.0), 2), still(3, (20.0, 10.0), 2)];
        assert_eq!(first_contact(&hand, &objs, 16), Some((8, 1)));
        assert_eq!(label_of(&hand, &objs, 4).unwrap(), 3);
    }

    #[test]
    fn no_contact_is_degenerate() {
        let hand = hand_path(&[(0.0, 0.0), (0.0, 1.0)]);
        let objs = vec![still(0, (30.0, 0.0), 2)];
        assert!(matches!(label_of(&hand, &objs, 2), Err(Error::DegenerateEpisode(_))));
    }

    #[test]
    fn episode_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_episode(&cfg, 17).unwrap();
        let b = generate_episode(&cfg, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clip.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.clip.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn stored_label_matches_resimulation() {
        let cfg = SynthConfig::default();
        for seed in 0..40 {
            let e = generate_episode(&cfg, seed).unwrap();
            assert_eq!(label_of(&e.hand, &e.objects, e.gap).unwrap(), e.label);
            assert_eq!(e.objects[0].type_id, e.label);
            assert_eq!(first_contact(&e.hand, &e.objects, 4 * e.gap), Some((e.gap, 0)));
        }
    }

    #[test]
    fn boxes_are_in_frame_with_one_hand() {
        let cfg = SynthConfig::default();
        let e = generate_episode(&cfg, 3).unwrap();
        assert_eq!(e.detections.len(), cfg.frames);
        for dets in &e.detections {
            assert_eq!(dets.iter().filter(|b| b.kind == BoxKind::Hand).count(), 1);
            for b in dets {
                assert!(inside(b, 32.0, 32.0), "{b:?}");
            }
        }
    }

    #[test]
    fn zero_jitter_boxes_bound_glyphs() {
        let cfg = SynthConfig { jitter: 0.0, noise: 0.0, glyph: 6.0, ..SynthConfig::default() };
        let e = generate_episode(&cfg, 5).unwrap();
        for (f, dets) in e.detections.iter().enumerate() {
            assert_eq!(dets[0].x1, e.hand[f].x1);
            assert_eq!(dets[0].y2, e.hand[f].y2);
            // the hand is painted last, so every pixel whose center lies in its box is white
            let b = &dets[0];
            let mut lit = 0;
            for y in 0..32 {
                for x in 0..32 {
                    let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
                    let px = &e.clip.data()[((f * 32 + y) * 32 + x) * 3..][..3];
                    let in_box = cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2;
                    assert_eq!(in_box, px == HAND_COLOR, "frame {f} pixel ({x},{y})");
                    lit += usize::from(in_box);
                }
            }
            assert!(lit >= 25);
        }
    }

    #[test]
    fn oversized_glyph_is_rejected() {
        let cfg = SynthConfig { glyph: 20.0, ..SynthConfig::default() };
        assert!(matches!(generate_episode(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_split_and_counts() {
        let cfg = SynthConfig::default();
        let (eps, m) = generate_dataset(&cfg, 1, 9).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(m.episodes[0].split, Split::Eval);
        let (a, _) = generate_dataset(&cfg, 3, 0).unwrap();
        let (b, _) = generate_dataset(&cfg, 3, 100).unwrap();
        for x in &a {
            for y in &b {
                assert_ne!(x.clip, y.clip);
            }
        }
    }

    #[test]
    fn every_class_has_eval_samples() {
        let cfg = SynthConfig::default();
        let (_, m) = generate_dataset(&cfg, 512, 0).unwrap();
        assert_eq!(m.episodes.len(), 512);
        let eval = &m.class_counts["eval"];
        assert!(eval.iter().all(|&c| c >= 1), "{eval:?}");
        assert_eq!(eval.iter().sum::<usize>() + m.class_counts["train"].iter().sum::<usize>(), 512);
    }
}
