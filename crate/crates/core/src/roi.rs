//! Hand and object region tokens: track association, region selection,
//! bilinear RoI sampling on the token grid and the MLP/max-pool head.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ComputationRecord, ParamStore, Real, RowMix, Tensor, Var};
use crate::tokenizer::{GridDims, Tubelet};

/// Smallest box side, in token units, used when sampling.
pub const MIN_BOX_TOKENS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxKind {
    Hand,
    Object,
}

/// Detection in pixel coordinates. One JSON object per line on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub frame: usize,
    pub kind: BoxKind,
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u64>,
}

impl BoundingBox {
    pub fn new(frame: usize, kind: BoxKind, x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self {
            frame,
            kind,
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
            score: 1.0,
            track_id: None,
        }
    }

    pub fn with_track(mut self, id: u64) -> Self {
        self.track_id = Some(id);
        self
    }

    /// Clamps the corners into a `width x height` frame.
    pub fn clamped(mut self, width: f32, height: f32) -> Self {
        self.x1 = self.x1.clamp(0.0, width);
        self.x2 = self.x2.clamp(0.0, width);
        self.y1 = self.y1.clamp(0.0, height);
        self.y2 = self.y2.clamp(0.0, height);
        self
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn intersection(&self, other: &Self) -> f32 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &Self) -> f32 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center_distance(&self, other: &Self) -> f32 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
            ..self.clone()
        }
    }
}

/// Greedy frame-to-frame association by descending IoU.
///
/// A detection in frame `t` continues the track of a detection in frame `t-1`
/// when both have the same kind and their IoU is strictly above the threshold.
/// Unmatched detections open new tracks.
pub fn associate_tracks(frames: &[Vec<BoundingBox>], iou_threshold: f32) -> Vec<Vec<BoundingBox>> {
    let mut next_id = 0u64;
    let mut out: Vec<Vec<BoundingBox>> = Vec::with_capacity(frames.len());
    for (t, dets) in frames.iter().enumerate() {
        let mut cur: Vec<BoundingBox> = dets.iter().cloned().map(|mut b| {
            b.track_id = None;
            b
        }).collect();
        if t > 0 {
            let prev = &out[t - 1];
            let mut pairs: Vec<(f32, usize, usize)> = Vec::new();
            for (i, a) in cur.iter().enumerate() {
                for (j, b) in prev.iter().enumerate() {
                    if a.kind != b.kind {
                        continue;
                    }
                    let iou = a.iou(b);
                    if iou > iou_threshold {
                        pairs.push((iou, i, j));
                    }
                }
            }
            pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut used_prev = vec![false; prev.len()];
            for (_, i, j) in pairs {
                if cur[i].track_id.is_none() && !used_prev[j] {
                    cur[i].track_id = prev[j].track_id;
                    used_prev[j] = true;
                }
            }
        }
        for b in cur.iter_mut().filter(|b| b.track_id.is_none()) {
            b.track_id = Some(next_id);
            next_id += 1;
        }
        out.push(cur);
    }
    out
}

/// Hand box and the `N` nearest object boxes of one temporal position.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRegions {
    pub hand: BoundingBox,
    /// Ascending hand distance; `None` marks a null slot.
    pub objects: Vec<Option<BoundingBox>>,
}

impl FrameRegions {
    pub fn mask(&self) -> Vec<bool> {
        self.objects.iter().map(Option::is_some).collect()
    }
}

fn box_order(a: &BoundingBox, b: &BoundingBox) -> Ordering {
    a.track_id
        .cmp(&b.track_id)
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

/// Per frame, picks the hand box and the `n` objects closest to it.
///
/// With `hand_track` unset the highest scoring hand is used. A frame without a
/// hand reuses the most recent hand box, or the full frame when none was seen.
pub fn select_regions(
    frames: &[Vec<BoundingBox>],
    hand_track: Option<u64>,
    n: usize,
    width: f32,
    height: f32,
) -> Vec<FrameRegions> {
    let mut last_hand: Option<BoundingBox> = None;
    frames
        .iter()
        .enumerate()
        .map(|(t, dets)| {
            let hand = dets
                .iter()
                .filter(|b| b.kind == BoxKind::Hand)
                .filter(|b| hand_track.is_none() || b.track_id == hand_track)
                .max_by(|a, b| a.score.total_cmp(&b.score).then(box_order(b, a)))
                .cloned()
                .or_else(|| last_hand.clone())
                .unwrap_or_else(|| BoundingBox {
                    score: 0.0,
                    ..BoundingBox::new(t, BoxKind::Hand, 0.0, 0.0, width, height)
                });
            let hand = BoundingBox { frame: t, ..hand };
            last_hand = Some(hand.clone());
            let mut objs: Vec<(f32, &BoundingBox)> = dets
                .iter()
                .filter(|b| b.kind == BoxKind::Object)
                .map(|b| (b.center_distance(&hand), b))
                .collect();
            objs.sort_by(|a, b| a.0.total_cmp(&b.0).then(box_order(a.1, b.1)));
            let mut objects: Vec<Option<BoundingBox>> =
                objs.into_iter().take(n).map(|(_, b)| Some(b.clone())).collect();
            objects.resize(n, None);
            FrameRegions { hand, objects }
        })
        .collect()
}

/// Averages the boxes of each track over the `time` pixel frames of every
/// temporal block; block `t` covers frames `t*time .. (t+1)*time`.
pub fn aggregate_blocks(frames: &[Vec<BoundingBox>], time: usize) -> Vec<Vec<BoundingBox>> {
    let blocks = frames.len() / time.max(1);
    (0..blocks)
        .map(|t| {
            let mut order: Vec<(BoxKind, Option<u64>, usize)> = Vec::new();
            let mut sums: HashMap<(BoxKind, Option<u64>, usize), ([f64; 5], usize)> = HashMap::new();
            for (f, dets) in frames[t * time..(t + 1) * time].iter().enumerate() {
                for (i, b) in dets.iter().enumerate() {
                    // untracked boxes are never merged
                    let key = (b.kind, b.track_id, if b.track_id.is_some() { 0 } else { f * 10_000 + i + 1 });
                    let e = sums.entry(key).or_insert_with(|| {
                        order.push(key);
                        ([0.0; 5], 0)
                    });
                    for (acc, v) in e.0.iter_mut().zip([b.x1, b.y1, b.x2, b.y2, b.score]) {
                        *acc += v as f64;
                    }
                    e.1 += 1;
                }
            }
            order
                .iter()
                .map(|key| {
                    let (s, n) = sums[key];
                    let m = |i: usize| (s[i] / n as f64) as f32;
                    BoundingBox {
                        frame: t,
                        kind: key.0,
                        x1: m(0),
                        y1: m(1),
                        x2: m(2),
                        y2: m(3),
                        score: m(4),
                        track_id: key.1,
                    }
                })
                .collect()
        })
        .collect()
}

/// Bilinear weights, over spatial token indices, for each of the `g x g` bin
/// centers of `bbox` (pixel coordinates) on a `dims.rows x dims.cols` lattice.
pub fn roi_align_weights(
    bbox: &BoundingBox,
    dims: GridDims,
    tubelet: Tubelet,
    g: usize,
) -> Vec<Vec<(usize, f64)>> {
    let sx = tubelet.width as f64;
    let sy = tubelet.height as f64;
    let (mut x1, mut x2) = (bbox.x1 as f64 / sx, bbox.x2 as f64 / sx);
    let (mut y1, mut y2) = (bbox.y1 as f64 / sy, bbox.y2 as f64 / sy);
    let (cw, ch) = (dims.cols as f64, dims.rows as f64);
    x1 = x1.clamp(0.0, cw);
    x2 = x2.clamp(0.0, cw);
    y1 = y1.clamp(0.0, ch);
    y2 = y2.clamp(0.0, ch);
    if x2 - x1 < MIN_BOX_TOKENS {
        let c = 0.5 * (x1 + x2);
        x1 = c - 0.5 * MIN_BOX_TOKENS;
        x2 = c + 0.5 * MIN_BOX_TOKENS;
    }
    if y2 - y1 < MIN_BOX_TOKENS {
        let c = 0.5 * (y1 + y2);
        y1 = c - 0.5 * MIN_BOX_TOKENS;
        y2 = c + 0.5 * MIN_BOX_TOKENS;
    }
    let (bw, bh) = ((x2 - x1) / g as f64, (y2 - y1) / g as f64);
    let mut bins = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let x = x1 + (j as f64 + 0.5) * bw;
            let y = y1 + (i as f64 + 0.5) * bh;
            bins.push(bilinear_terms(x, y, dims));
        }
    }
    bins
}

/// Bilinear interpolation terms at token-space point `(x, y)`; token `(r, c)`
/// sits at `(c + 0.5, r + 0.5)`.
fn bilinear_terms(x: f64, y: f64, dims: GridDims) -> Vec<(usize, f64)> {
    let u = (x - 0.5).clamp(0.0, (dims.cols - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (dims.rows - 1) as f64);
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (c1, r1) = ((c0 + 1).min(dims.cols - 1), (r0 + 1).min(dims.rows - 1));
    let (a, b) = (u - c0 as f64, v - r0 as f64);
    let mut terms: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (r, c, w) in [
        (r0, c0, (1.0 - a) * (1.0 - b)),
        (r0, c1, a * (1.0 - b)),
        (r1, c0, (1.0 - a) * b),
        (r1, c1, a * b),
    ] {
        if w == 0.0 {
            continue;
        }
        let s = dims.spatial_index(r, c);
        match terms.iter_mut().find(|(idx, _)| *idx == s) {
            Some(t) => t.1 += w,
            None => terms.push((s, w)),
        }
    }
    terms
}

/// Samples a `g x g x d` crop from one frame's `S x d` token rows.
pub fn roi_align<F: Real>(
    frame_tokens: &Tensor<F>,
    dims: GridDims,
    tubelet: Tubelet,
    bbox: &BoundingBox,
    g: usize,
) -> Result<Tensor<F>> {
    if frame_tokens.rows() != dims.spatial() {
        return Err(shape_err("roi_align", format!("{:?} for {dims:?}", frame_tokens.shape())));
    }
    let d = frame_tokens.cols();
    let mut out = Vec::with_capacity(g * g * d);
    for bin in roi_align_weights(bbox, dims, tubelet, g) {
        let mut cell = vec![F::zero(); d];
        for (s, w) in bin {
            for (o, x) in cell.iter_mut().zip(frame_tokens.row(s)) {
                *o += F::lit(w) * *x;
            }
        }
        out.extend(cell);
    }
    Tensor::new(vec![g, g, d], out)
}

/// Per-cell two-layer MLP (`d -> d -> d`, GELU) followed by a max over cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiHeadParams {
    pub prefix: String,
    pub grid: usize,
}

impl RoiHeadParams {
    pub fn new(prefix: impl Into<String>, grid: usize) -> Self {
        Self { prefix: prefix.into(), grid }
    }

    pub fn names(&self) -> [String; 4] {
        ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"].map(|s| format!("{}.{s}", self.prefix))
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::Config("RoI grid must be at least 1".into()));
        }
        let [w1, b1, w2, b2] = self.names();
        store.init_linear(&w1, dim, dim, rng);
        store.init_const(&b1, &[dim], 0.0);
        store.init_linear(&w2, dim, dim, rng);
        store.init_const(&b2, &[dim], 0.0);
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

/// Elementwise max over each consecutive block of `g*g` cell rows.
pub fn pool_cells<F: Real>(rec: &mut ComputationRecord<F>, cells: Var, g: usize) -> Result<Var> {
    rec.group_max(cells, g * g)
}

/// Applies the head MLP to every cell row, then max-pools each region's cells.
pub fn region_token<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    head: &RoiHeadParams,
    cells: Var,
) -> Result<Var> {
    let [w1, b1, w2, b2] = head.names().map(|n| rec.param(store, &n));
    let h = rec.matmul(cells, w1?)?;
    let h = rec.add_row(h, b1?)?;
    let h = rec.gelu(h)?;
    let h = rec.matmul(h, w2?)?;
    let h = rec.add_row(h, b2?)?;
    pool_cells(rec, h, head.grid)
}

/// Pools one token per `(temporal position, box)` pair from the `(T*S) x d` grid.
pub fn pool_boxes<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    head: &RoiHeadParams,
    tokens: Var,
    dims: GridDims,
    tubelet: Tubelet,
    boxes: &[(usize, &BoundingBox)],
) -> Result<Var> {
    let mut mix = RowMix::new();
    for &(t, b) in boxes {
        if t >= dims.time {
            return Err(shape_err("pool_boxes", format!("temporal position {t} of {}", dims.time)));
        }
        let offset = t * dims.spatial();
        for bin in roi_align_weights(b, dims, tubelet, head.grid) {
            mix.push_row(bin.into_iter().map(|(s, w)| (offset + s, w)));
        }
    }
    let cells = rec.mix_rows(tokens, mix)?;
    region_token(rec, store, head, cells)
}

/// Hand tokens `T x d`, object tokens `(T*N) x d` (row `t*N + i`) and the slot mask.
#[derive(Clone, Debug)]
pub struct RegionTokens {
    pub hand: Var,
    pub objects: Var,
    pub mask: Vec<bool>,
    pub tracks: Vec<Option<u64>>,
    pub time: usize,
    pub slots: usize,
}

/// Builds hand and object tokens for per-temporal-position regions.
/// Null slots hold exactly zero rows.
pub fn build_region_tokens<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    head: &RoiHeadParams,
    tokens: Var,
    dims: GridDims,
    tubelet: Tubelet,
    regions: &[FrameRegions],
) -> Result<RegionTokens> {
    if regions.len() != dims.time {
        return Err(shape_err("build_region_tokens", format!("{} regions for {} positions", regions.len(), dims.time)));
    }
    let slots = regions.first().map_or(0, |r| r.objects.len());
    if regions.iter().any(|r| r.objects.len() != slots) {
        return Err(shape_err("build_region_tokens", "ragged object slots"));
    }
    let mut boxes: Vec<(usize, &BoundingBox)> = regions.iter().enumerate().map(|(t, r)| (t, &r.hand)).collect();
    let mut mix = RowMix::new();
    let mut mask = Vec::with_capacity(dims.time * slots);
    let mut tracks = Vec::with_capacity(dims.time * slots);
    for (t, r) in regions.iter().enumerate() {
        for slot in &r.objects {
            match slot {
                Some(b) => {
                    mix.push_row([(boxes.len(), 1.0)]);
                    boxes.push((t, b));
                    mask.push(true);
                    tracks.push(b.track_id);
                }
                None => {
                    mix.push_row([]);
                    mask.push(false);
                    tracks.push(None);
                }
            }
        }
    }
    let pooled = pool_boxes(rec, store, head, tokens, dims, tubelet, &boxes)?;
    let hand = rec.gather_rows(pooled, (0..dims.time).collect::<Vec<_>>())?;
    let objects = if slots == 0 {
        rec.constant(Tensor::zeros(&[0, rec.value(tokens).cols()]))
    } else {
        rec.mix_rows(pooled, mix)?
    };
    Ok(RegionTokens { hand, objects, mask, tracks, time: dims.time, slots })
}
