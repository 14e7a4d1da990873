//! Interaction tokens from hand and object region tokens.
//!
//! Three mechanisms are provided: per-frame spatial cross-attention between
//! the hand and objects (SCA), per-track self-attention over time (SOT), and
//! self-attention over time of hand/nearest-object union-box tokens (UB).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{multi_head_attend, AttentionParams, ComputationRecord, KeySets, ParamStore, Real, RowMix, Var};
use crate::roi::{pool_boxes, BoundingBox, RegionTokens, RoiHeadParams};
use crate::tokenizer::{GridDims, Tubelet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionVariant {
    Sca,
    Sot,
    Ub,
}

impl InteractionVariant {
    pub fn label(self) -> &'static str {
        match self {
            InteractionVariant::Sca => "SCA",
            InteractionVariant::Sot => "SOT",
            InteractionVariant::Ub => "UB",
        }
    }

    /// Interaction tokens per temporal position for `objects` object slots.
    pub fn tokens_per_frame(self, objects: usize) -> usize {
        match self {
            InteractionVariant::Sca | InteractionVariant::Sot => objects + 1,
            InteractionVariant::Ub => 1,
        }
    }
}

/// Interaction tokens `(T*K) x d`, row `t*K + k`, with a validity mask.
#[derive(Clone, Debug)]
pub struct InteractionTokens {
    pub tokens: Var,
    pub mask: Vec<bool>,
    pub time: usize,
    pub per_frame: usize,
}

impl InteractionTokens {
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&r| self.mask[r]).collect()
    }

    pub fn frame_of(&self, row: usize) -> usize {
        row / self.per_frame
    }
}

/// Parameter names of the interaction layer for one variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionParams {
    pub variant: InteractionVariant,
    pub hand: AttentionParams,
    pub object: AttentionParams,
}

impl InteractionParams {
    pub fn new(variant: InteractionVariant, heads: usize) -> Self {
        let (h, o) = match variant {
            InteractionVariant::Sca => ("sca.hand", "sca.object"),
            InteractionVariant::Sot => ("sot.hand", "sot.object"),
            InteractionVariant::Ub => ("ub.union", "ub.unused"),
        };
        Self { variant, hand: AttentionParams::new(h, heads), object: AttentionParams::new(o, heads) }
    }

    /// UB reuses the `hand` slot for its single union attention layer.
    pub fn union(&self) -> &AttentionParams {
        &self.hand
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Result<()> {
        self.hand.init(store, dim, rng)?;
        if self.variant != InteractionVariant::Ub {
            self.object.init(store, dim, rng)?;
        }
        Ok(())
    }
}

fn check_regions<F: Real>(rec: &ComputationRecord<F>, r: &RegionTokens) -> Result<()> {
    let (h, o) = (rec.value(r.hand), rec.value(r.objects));
    if h.rows() != r.time || o.rows() != r.time * r.slots || r.mask.len() != r.time * r.slots {
        return Err(shape_err(
            "interaction",
            format!("hand {:?} objects {:?} for T={} N={}", h.shape(), o.shape(), r.time, r.slots),
        ));
    }
    Ok(())
}

/// Interleaves refined hand rows (`T`) and object rows into `T x (N+1)` tokens.
/// `object_rows[t*N + i]` indexes the row of slot `(t, i)` in the refined
/// object block, or `None` for a null slot.
fn assemble<F: Real>(
    rec: &mut ComputationRecord<F>,
    hand: Var,
    objects: Option<Var>,
    object_rows: &[Option<usize>],
    r: &RegionTokens,
) -> Result<InteractionTokens> {
    let stacked = match objects {
        Some(o) => rec.concat_rows(&[hand, o])?,
        None => hand,
    };
    let mut mix = RowMix::new();
    let mut mask = Vec::with_capacity(r.time * (r.slots + 1));
    for t in 0..r.time {
        mix.push_row([(t, 1.0)]);
        mask.push(true);
        for i in 0..r.slots {
            match object_rows[t * r.slots + i] {
                Some(k) => {
                    mix.push_row([(r.time + k, 1.0)]);
                    mask.push(true);
                }
                None => {
                    mix.push_row([]);
                    mask.push(false);
                }
            }
        }
    }
    let tokens = rec.mix_rows(stacked, mix)?;
    Ok(InteractionTokens { tokens, mask, time: r.time, per_frame: r.slots + 1 })
}

/// Spatial cross-attention within each frame.
///
/// The hand attends over the valid objects of its frame; each valid object
/// attends over the hand and the other valid objects of its frame. Frames
/// without valid objects pass the hand through unrefined unless `strict`.
pub fn sca<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    regions: &RegionTokens,
    params: &InteractionParams,
    strict: bool,
) -> Result<InteractionTokens> {
    check_regions(rec, regions)?;
    let (time, slots) = (regions.time, regions.slots);
    let valid = |t: usize, i: usize| regions.mask[t * slots + i];

    let frames: Vec<usize> = (0..time).filter(|&t| (0..slots).any(|i| valid(t, i))).collect();
    if frames.is_empty() && strict {
        return Err(Error::NoValidObjects);
    }
    let hand_out = if frames.is_empty() {
        regions.hand
    } else {
        let queries = rec.gather_rows(regions.hand, frames.clone())?;
        let mut keys = KeySets::new();
        for &t in &frames {
            keys.push((0..slots).filter(|&i| valid(t, i)).map(|i| t * slots + i));
        }
        let refined = multi_head_attend(rec, store, &params.hand, queries, regions.objects, keys)?;
        // refined rows first, then the original hand rows for passthrough frames
        let both = rec.concat_rows(&[refined, regions.hand])?;
        let rows: Vec<usize> = (0..time)
            .map(|t| frames.iter().position(|&f| f == t).unwrap_or(frames.len() + t))
            .collect();
        rec.gather_rows(both, rows)?
    };

    let queries: Vec<usize> = (0..time * slots).filter(|&r| regions.mask[r]).collect();
    let mut object_rows = vec![None; time * slots];
    let object_out = if queries.is_empty() {
        None
    } else {
        let sources = rec.concat_rows(&[regions.hand, regions.objects])?;
        let q = rec.gather_rows(regions.objects, queries.clone())?;
        let mut keys = KeySets::new();
        for (k, &r) in queries.iter().enumerate() {
            let (t, i) = (r / slots, r % slots);
            keys.push(
                std::iter::once(t).chain((0..slots).filter(|&j| j != i && valid(t, j)).map(|j| time + t * slots + j)),
            );
            object_rows[r] = Some(k);
        }
        Some(multi_head_attend(rec, store, &params.object, q, sources, keys)?)
    };
    assemble(rec, hand_out, object_out, &object_rows, regions)
}

/// Self-attention over time, separately for the hand track and each object track.
pub fn sot<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    regions: &RegionTokens,
    params: &InteractionParams,
) -> Result<InteractionTokens> {
    check_regions(rec, regions)?;
    let (time, slots) = (regions.time, regions.slots);
    let hand_out =
        multi_head_attend(rec, store, &params.hand, regions.hand, regions.hand, KeySets::full(time, time))?;

    let queries: Vec<usize> = (0..time * slots).filter(|&r| regions.mask[r]).collect();
    let mut object_rows = vec![None; time * slots];
    let object_out = if queries.is_empty() {
        None
    } else {
        let same_track = |a: usize, b: usize| match (regions.tracks[a], regions.tracks[b]) {
            (Some(x), Some(y)) => x == y,
            (None, None) => a % slots == b % slots,
            _ => false,
        };
        let mut keys = KeySets::new();
        for (k, &r) in queries.iter().enumerate() {
            keys.push(queries.iter().copied().filter(|&c| same_track(r, c)));
            object_rows[r] = Some(k);
        }
        let q = rec.gather_rows(regions.objects, queries.clone())?;
        Some(multi_head_attend(rec, store, &params.object, q, regions.objects, keys)?)
    };
    assemble(rec, hand_out, object_out, &object_rows, regions)
}

/// Union of the hand box with its nearest object (by center distance).
pub fn union_box(hand: &BoundingBox, objects: &[BoundingBox]) -> BoundingBox {
    objects
        .iter()
        .min_by(|a, b| a.center_distance(hand).total_cmp(&b.center_distance(hand)))
        .map_or_else(|| hand.clone(), |o| hand.union(o))
}

/// Union-box tokens pooled per temporal position and self-attended over time.
#[allow(clippy::too_many_arguments)]
pub fn ub<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    tokens: Var,
    dims: GridDims,
    tubelet: Tubelet,
    union_boxes: &[BoundingBox],
    head: &RoiHeadParams,
    params: &InteractionParams,
) -> Result<InteractionTokens> {
    if union_boxes.len() != dims.time {
        return Err(shape_err("ub", format!("{} union boxes for T={}", union_boxes.len(), dims.time)));
    }
    let boxes: Vec<(usize, &BoundingBox)> = union_boxes.iter().enumerate().collect();
    let u = pool_boxes(rec, store, head, tokens, dims, tubelet, &boxes)?;
    let time = dims.time;
    let out = multi_head_attend(rec, store, params.union(), u, u, KeySets::full(time, time))?;
    Ok(InteractionTokens { tokens: out, mask: vec![true; time], time, per_frame: 1 })
}

/// Inputs for [`model_interactions`].
pub struct InteractionInputs<'a> {
    pub regions: &'a RegionTokens,
    pub tokens: Var,
    pub dims: GridDims,
    pub tubelet: Tubelet,
    pub union_boxes: &'a [BoundingBox],
    pub head: &'a RoiHeadParams,
}

pub fn model_interactions<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    params: &InteractionParams,
    inputs: &InteractionInputs<'_>,
) -> Result<InteractionTokens> {
    match params.variant {
        InteractionVariant::Sca => sca(rec, store, inputs.regions, params, false),
        InteractionVariant::Sot => sot(rec, store, inputs.regions, params),
        InteractionVariant::Ub => ub(
            rec,
            store,
            inputs.tokens,
            inputs.dims,
            inputs.tubelet,
            inputs.union_boxes,
            inputs.head,
            params,
        ),
    }
}
