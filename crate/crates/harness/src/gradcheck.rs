//! Finite-difference checks of every parameterized block in `f64`.
//!
//! Each block is evaluated at tiny dimensions (width 8, 2 heads, 3 temporal
//! positions, a 2x2 spatial grid, 2 object slots) on random inputs. The
//! scalar objective is a fixed random projection `sum(R * out)` of the
//! block output (the classifier uses its cross-entropy). Inputs are
//! registered as named leaves so their gradients are checked as well.

use std::time::Instant;

use inavit::interaction::{sca, sot, ub, InteractionParams, InteractionTokens, InteractionVariant};
use inavit::model::icv;
use inavit::numerics::{
    finite_difference_gradient, max_relative_error, multi_head_attend, AttentionParams, ComputationRecord, KeySets,
    ParamStore, Tensor, Var,
};
use inavit::roi::{build_region_tokens, BoundingBox, BoxKind, FrameRegions, RegionTokens, RoiHeadParams};
use inavit::tokenizer::{GridDims, Tubelet};
use inavit::trajectory::{backbone_block, tca, BlockParams, TrajectoryParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HarnessError, Result};

pub const THRESHOLD: f64 = 1e-5;
pub const FD_EPS: f64 = 1e-5;
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = max(MIN_FLOOR, FLOOR_FRACTION * g)`, `g` the block's largest
/// gradient magnitude. Coordinates a thousand times smaller than the block's
/// scale are therefore held to an absolute error of `1e-8 * g`.
pub const FLOOR_FRACTION: f64 = 1e-3;
pub const MIN_FLOOR: f64 = 1e-6;
/// Test points are redrawn until every max-pool column has at least this
/// gap below its largest entry, so no step crosses a kink.
pub const KINK_MARGIN: f64 = 20.0 * FD_EPS;
const MAX_DRAWS: u64 = 256;

pub const BLOCKS: [&str; 9] = ["numerics", "roi", "sca", "sot", "ub", "tca", "icv", "backbone", "classifier"];

const D: usize = 8;
const HEADS: usize = 2;
const DIMS: GridDims = GridDims { time: 3, rows: 2, cols: 2 };
const TUBELET: Tubelet = Tubelet { time: 1, height: 8, width: 8 };
const SLOTS: usize = 2;
const CLASSES: usize = 5;

type Build = Box<dyn Fn(&mut ComputationRecord<f64>, &ParamStore<f64>) -> inavit::Result<Var> + Send + Sync>;

/// One block under test: its parameters (and inputs) and the objective.
pub struct BlockCase {
    pub name: &'static str,
    pub params: ParamStore<f64>,
    /// Test points drawn before one cleared [`KINK_MARGIN`].
    pub draws: u64,
    build: Build,
}

impl BlockCase {
    pub fn objective(&self, p: &ParamStore<f64>) -> inavit::Result<f64> {
        let mut rec = ComputationRecord::new();
        let loss = (self.build)(&mut rec, p)?;
        Ok(rec.value(loss).data()[0])
    }

    pub fn reverse(&self, fault: Option<f64>) -> inavit::Result<ParamStore<f64>> {
        let mut rec = ComputationRecord::new();
        let loss = (self.build)(&mut rec, &self.params)?;
        if let Some(f) = fault {
            rec.inject_backward_fault(f);
        }
        rec.reverse_gradients_for(loss, &self.params)
    }

    /// Smallest max-pool gap at the test point.
    pub fn kink_margin(&self) -> inavit::Result<Option<f64>> {
        let mut rec = ComputationRecord::new();
        (self.build)(&mut rec, &self.params)?;
        Ok(rec.group_max_margin())
    }

    pub fn finite_difference(&self) -> inavit::Result<ParamStore<f64>> {
        finite_difference_gradient(|p| self.objective(p), &self.params, FD_EPS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub block: String,
    /// Checked scalar coordinates (parameters and inputs).
    pub coordinates: usize,
    pub draws: u64,
    pub floor: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
    pub threshold: f64,
    pub passed: bool,
    pub wall_clock_s: f64,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// `sum(R * out)` with `R` drawn from `seed`; the same `R` on every call.
fn project(rec: &mut ComputationRecord<f64>, out: Var, seed: u64) -> inavit::Result<Var> {
    let shape = rec.value(out).shape().to_vec();
    let r = rec.constant(random(&shape, &mut ChaCha8Rng::seed_from_u64(seed)));
    let m = rec.mul(out, r)?;
    rec.sum(m)
}

/// Random scale/shift for a layer norm named `prefix`.
fn init_norm(store: &mut ParamStore<f64>, prefix: &str, rng: &mut ChaCha8Rng) {
    let scale = Tensor::new(vec![D], (0..D).map(|_| rng.random_range(0.5..1.5)).collect()).expect("shape");
    store.insert(format!("{prefix}.scale"), scale);
    store.insert(format!("{prefix}.shift"), random(&[D], rng));
}

fn boxes_for_frames() -> Vec<FrameRegions> {
    let b = |t: usize, kind, x1, y1, x2, y2| BoundingBox::new(t, kind, x1, y1, x2, y2);
    vec![
        FrameRegions {
            hand: b(0, BoxKind::Hand, 1.0, 2.0, 9.5, 11.0),
            objects: vec![Some(b(0, BoxKind::Object, 6.0, 3.0, 15.0, 9.0).with_track(1)), None],
        },
        FrameRegions {
            hand: b(1, BoxKind::Hand, 3.0, 2.5, 10.0, 12.0),
            objects: vec![
                Some(b(1, BoxKind::Object, 7.0, 4.0, 14.5, 10.0).with_track(1)),
                Some(b(1, BoxKind::Object, 0.5, 9.0, 6.0, 15.0).with_track(2)),
            ],
        },
        FrameRegions {
            hand: b(2, BoxKind::Hand, 4.0, 3.0, 12.0, 13.5),
            objects: vec![
                Some(b(2, BoxKind::Object, 1.0, 8.5, 7.0, 14.0).with_track(2)),
                Some(b(2, BoxKind::Object, 8.0, 5.0, 15.0, 11.0).with_track(1)),
            ],
        },
    ]
}

fn region_case(name: &'static str, variant: InteractionVariant, seed: u64) -> BlockCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ip = InteractionParams::new(variant, HEADS);
    let mut params = ParamStore::new();
    ip.init(&mut params, D, &mut rng).expect("init");
    params.insert("input.hand", random(&[DIMS.time, D], &mut rng));
    params.insert("input.objects", random(&[DIMS.time * SLOTS, D], &mut rng));
    // frame 0: one object; frame 1: both; frame 2: none (hand passes through in SCA)
    let mask = vec![true, false, true, true, false, false];
    let tracks = vec![Some(1), None, Some(2), Some(1), None, None];
    let build: Build = Box::new(move |rec, p| {
        let hand = rec.param(p, "input.hand")?;
        let objects = rec.param(p, "input.objects")?;
        let regions =
            RegionTokens { hand, objects, mask: mask.clone(), tracks: tracks.clone(), time: DIMS.time, slots: SLOTS };
        let out = match variant {
            InteractionVariant::Sca => sca(rec, p, &regions, &ip, false)?,
            _ => sot(rec, p, &regions, &ip)?,
        };
        project(rec, out.tokens, seed + 1)
    });
    BlockCase { name, params, draws: 1, build }
}

fn interaction_inputs(params: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Vec<bool> {
    params.insert("input.interactions", random(&[DIMS.time * (SLOTS + 1), D], rng));
    params.insert("input.video", random(&[DIMS.tokens(), D], rng));
    vec![true, true, false, true, false, false, true, true, true]
}

fn interaction_tokens(rec: &mut ComputationRecord<f64>, p: &ParamStore<f64>, mask: &[bool]) -> inavit::Result<InteractionTokens> {
    let tokens = rec.param(p, "input.interactions")?;
    Ok(InteractionTokens { tokens, mask: mask.to_vec(), time: DIMS.time, per_frame: SLOTS + 1 })
}

/// Builds the case for `name`; `seed` picks the random parameters and inputs.
pub fn block_case(name: &str, seed: u64) -> Result<BlockCase> {
    let base = seed.wrapping_mul(7919).wrapping_add(BLOCKS.iter().position(|b| *b == name).unwrap_or(0) as u64 * 17);
    for k in 0..MAX_DRAWS {
        let mut case = draw_case(name, base.wrapping_add(k.wrapping_mul(0x9e37_79b9)))?;
        case.draws = k + 1;
        if case.kink_margin()?.is_none_or(|m| m > KINK_MARGIN) {
            return Ok(case);
        }
    }
    Err(HarnessError::Config(format!("no kink-free test point for `{name}` in {MAX_DRAWS} draws")))
}

fn draw_case(name: &str, seed: u64) -> Result<BlockCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let case = match name {
        "numerics" => {
            let ap = AttentionParams::new("attn", HEADS);
            ap.init(&mut params, D, &mut rng)?;
            init_norm(&mut params, "norm", &mut rng);
            params.insert("input.x", random(&[6, D], &mut rng));
            let mut keys = KeySets::new();
            for q in 0..6 {
                keys.push((0..6).filter(|k| (q + k) % 3 != 0 || *k == q));
            }
            let build: Build = Box::new(move |rec, p| {
                let x = rec.param(p, "input.x")?;
                let (s, b) = (rec.param(p, "norm.scale")?, rec.param(p, "norm.shift")?);
                let xn = rec.layer_norm(x, s, b)?;
                let a = multi_head_attend(rec, p, &ap, xn, xn, keys.clone())?;
                let g = rec.gelu(a)?;
                project(rec, g, seed + 1)
            });
            BlockCase { name: "numerics", params, draws: 1, build }
        }
        "roi" => {
            let head = RoiHeadParams::new("roi", 2);
            head.init(&mut params, D, &mut rng)?;
            params.insert("roi.fc1.bias", random(&[D], &mut rng));
            params.insert("input.x", random(&[DIMS.tokens(), D], &mut rng));
            let regions = boxes_for_frames();
            let build: Build = Box::new(move |rec, p| {
                let x = rec.param(p, "input.x")?;
                let rt = build_region_tokens(rec, p, &head, x, DIMS, TUBELET, &regions)?;
                let out = rec.concat_rows(&[rt.hand, rt.objects])?;
                project(rec, out, seed + 1)
            });
            BlockCase { name: "roi", params, draws: 1, build }
        }
        "sca" => region_case("sca", InteractionVariant::Sca, seed),
        "sot" => region_case("sot", InteractionVariant::Sot, seed),
        "ub" => {
            let head = RoiHeadParams::new("roi", 2);
            let ip = InteractionParams::new(InteractionVariant::Ub, HEADS);
            head.init(&mut params, D, &mut rng)?;
            ip.init(&mut params, D, &mut rng)?;
            params.insert("input.x", random(&[DIMS.tokens(), D], &mut rng));
            let unions: Vec<BoundingBox> = boxes_for_frames()
                .iter()
                .map(|r| r.objects.iter().flatten().fold(r.hand.clone(), |u, o| u.union(o)))
                .collect();
            let build: Build = Box::new(move |rec, p| {
                let x = rec.param(p, "input.x")?;
                let out = ub(rec, p, x, DIMS, TUBELET, &unions, &head, &ip)?;
                project(rec, out.tokens, seed + 1)
            });
            BlockCase { name: "ub", params, draws: 1, build }
        }
        "tca" => {
            let tp = TrajectoryParams::new("tca", HEADS, false);
            tp.init(&mut params, D, &mut rng)?;
            let mask = interaction_inputs(&mut params, &mut rng);
            let build: Build = Box::new(move |rec, p| {
                let inter = interaction_tokens(rec, p, &mask)?;
                let video = rec.param(p, "input.video")?;
                let (out, _) = tca(rec, p, &tp, &inter, video, DIMS, true)?;
                project(rec, out.tokens, seed + 1)
            });
            BlockCase { name: "tca", params, draws: 1, build }
        }
        "icv" => {
            let ap = AttentionParams::new("icv.attn", HEADS);
            ap.init(&mut params, D, &mut rng)?;
            init_norm(&mut params, "icv.norm", &mut rng);
            let mask = interaction_inputs(&mut params, &mut rng);
            let build: Build = Box::new(move |rec, p| {
                let inter = interaction_tokens(rec, p, &mask)?;
                let video = rec.param(p, "input.video")?;
                let (out, _) = icv(rec, p, &ap, &inter, video)?;
                project(rec, out, seed + 1)
            });
            BlockCase { name: "icv", params, draws: 1, build }
        }
        "backbone" => {
            let bp = BlockParams::new("blocks.0", HEADS);
            bp.init(&mut params, D, &mut rng)?;
            init_norm(&mut params, "blocks.0.norm1", &mut rng);
            init_norm(&mut params, "blocks.0.norm2", &mut rng);
            params.insert("blocks.0.mlp.fc1.bias", random(&[4 * D], &mut rng));
            params.insert("input.x", random(&[1 + DIMS.tokens(), D], &mut rng));
            let build: Build = Box::new(move |rec, p| {
                let x = rec.param(p, "input.x")?;
                let out = backbone_block(rec, p, &bp, x, 1, DIMS)?;
                project(rec, out.out, seed + 1)
            });
            BlockCase { name: "backbone", params, draws: 1, build }
        }
        "classifier" => {
            init_norm(&mut params, "head.norm", &mut rng);
            params.init_linear("head.weight", D, CLASSES, &mut rng);
            params.insert("head.bias", random(&[CLASSES], &mut rng));
            params.insert("input.h", random(&[1 + DIMS.tokens(), D], &mut rng));
            let build: Build = Box::new(move |rec, p| {
                let h = rec.param(p, "input.h")?;
                let (s, b) = (rec.param(p, "head.norm.scale")?, rec.param(p, "head.norm.shift")?);
                let hn = rec.layer_norm(h, s, b)?;
                let c = rec.gather_rows(hn, vec![0])?;
                let w = rec.param(p, "head.weight")?;
                let z = rec.matmul(c, w)?;
                let bias = rec.param(p, "head.bias")?;
                let z = rec.add_row(z, bias)?;
                rec.cross_entropy(z, 2)
            });
            BlockCase { name: "classifier", params, draws: 1, build }
        }
        other => {
            return Err(HarnessError::Config(format!("unknown gradcheck block `{other}` (full, {})", BLOCKS.join(", "))))
        }
    };
    Ok(case)
}

/// Block names covered by `scope`: `full` or a single block name.
pub fn scope_blocks(scope: &str) -> Result<Vec<&'static str>> {
    if scope == "full" {
        return Ok(BLOCKS.to_vec());
    }
    BLOCKS
        .iter()
        .find(|b| **b == scope)
        .map(|b| vec![*b])
        .ok_or_else(|| HarnessError::Config(format!("unknown gradcheck scope `{scope}` (full, {})", BLOCKS.join(", "))))
}

pub fn check_block(case: &BlockCase, fault: Option<f64>) -> Result<BlockReport> {
    let reverse = case.reverse(fault)?;
    let numeric = case.finite_difference()?;
    let scale = reverse.iter().chain(numeric.iter()).flat_map(|(_, t)| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = MIN_FLOOR.max(FLOOR_FRACTION * scale);
    let err = max_relative_error(&reverse, &numeric, floor)?;
    Ok(BlockReport {
        block: case.name.to_string(),
        coordinates: case.params.num_elements(),
        draws: case.draws,
        floor,
        max_rel_error: err,
        passed: err <= THRESHOLD,
    })
}

/// Runs every block of `scope`. `fault` corrupts the backward pass (negative control).
pub fn gradcheck_suite(scope: &str, seed: u64, fault: Option<f64>) -> Result<GradcheckReport> {
    let start = Instant::now();
    let blocks = scope_blocks(scope)?
        .into_iter()
        .map(|b| check_block(&block_case(b, seed)?, fault))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        passed: blocks.iter().all(|b| b.passed),
        blocks,
        threshold: THRESHOLD,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}
