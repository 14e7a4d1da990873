//! Fixtures shared by the integration tests of both crates: random inputs,
//! loop oracles and the library-versus-oracle comparisons.
#![allow(dead_code)]

pub mod oracle;

use inavit::interaction::{sca, sot, ub, InteractionParams, InteractionTokens, InteractionVariant};
use inavit::model::{icv, ClipInput, InAViT, InAViTConfig};
use inavit::numerics::{attend, multi_head_attend, AttentionParams, ComputationRecord, KeySets, ParamStore, Tensor};
use inavit::roi::{BoundingBox, BoxKind, RegionTokens, RoiHeadParams};
use inavit::synthdata::{generate_episode, SynthConfig};
use inavit::tokenizer::{GridDims, TokenizerConfig, Tubelet};
use inavit::trajectory::{backbone_block, tca, trajectory_attend, BlockParams, TrajectoryParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oracle::{mat, max_abs_diff};

pub const ORACLE_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Replaces the constant-initialised biases, norm scales and shifts by random values.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        let range = if name.ends_with("scale") {
            0.5..1.5
        } else if name.ends_with("bias") || name.ends_with("shift") {
            -0.5..0.5
        } else {
            continue;
        };
        for v in t.data_mut() {
            *v = rng.random_range(range.clone());
        }
    }
}

/// Random slot mask with frame 0 fully valid and, when it exists, frame 1 empty.
pub fn random_mask(rng: &mut ChaCha8Rng, time: usize, slots: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..time * slots).map(|_| rng.random_bool(0.6)).collect();
    for i in 0..slots {
        mask[i] = true;
        if time > 1 {
            mask[slots + i] = false;
        }
    }
    mask
}

/// Sizes `(T, rows, cols, N, d, heads)` of the oracle sweep.
pub const SWEEP: [(usize, usize, usize, usize, usize, usize); 6] = [
    (1, 1, 1, 1, 2, 1),
    (2, 1, 2, 2, 4, 2),
    (2, 2, 2, 1, 6, 3),
    (3, 2, 2, 2, 8, 2),
    (4, 3, 3, 3, 16, 2),
    (4, 3, 3, 3, 16, 4),
];

pub fn mha_error(seed: u64, queries: usize, keys: usize, d: usize, heads: usize) -> f64 {
    let mut rng = rng(seed);
    let params = AttentionParams::new("attn", heads);
    let mut store = ParamStore::new();
    params.init(&mut store, d, &mut rng).unwrap();
    let t = random_tensor(&mut rng, queries, d);
    let s = random_tensor(&mut rng, keys, d);
    let lists: Vec<Vec<usize>> = (0..queries)
        .map(|i| {
            let mut l: Vec<usize> = (0..keys).filter(|_| rng.random_bool(0.6)).collect();
            if l.is_empty() {
                l.push(i % keys);
            }
            l
        })
        .collect();
    let mut ks = KeySets::new();
    for l in &lists {
        ks.push(l.iter().copied());
    }
    let mut rec = ComputationRecord::new();
    let (tv, sv) = (rec.constant(t.clone()), rec.constant(s.clone()));
    let out = multi_head_attend(&mut rec, &store, &params, tv, sv, ks).unwrap();
    max_abs_diff(&oracle::mha(&store, "attn", heads, &mat(&t), &mat(&s), &lists), rec.value(out))
}

/// Softmax of `q.k / sqrt(dh)` over the listed keys.
fn sqrt_scaled_weights(q: &[f64], k: &Tensor<f64>, cols: std::ops::Range<usize>, keys: &[usize]) -> Vec<f64> {
    let dh = cols.len() as f64;
    let logits: Vec<f64> = keys.iter().map(|&j| q.iter().zip(&k.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() / dh.sqrt()).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Attention weight checks on random inputs: (largest |row sum - 1|, largest
/// weight on a masked key, largest gap to weights computed with 1/sqrt(dh) logits).
///
/// The dense kernel is read out with identity values so each output row is its
/// weight row; the tape kernel is read through its trace.
pub fn attention_invariants(seed: u64, queries: usize, keys: usize, heads: usize) -> (f64, f64, f64) {
    let mut rng = rng(seed);
    let (mut sum_err, mut masked, mut scale_err) = (0.0f64, 0.0f64, 0.0f64);

    let q = random_tensor(&mut rng, queries, keys);
    let k = random_tensor(&mut rng, keys, keys);
    let mut eye = Tensor::zeros(&[keys, keys]);
    for j in 0..keys {
        eye.data_mut()[j * keys + j] = 1.0;
    }
    let mut mask: Vec<bool> = (0..keys).map(|_| rng.random_bool(0.6)).collect();
    mask[seed as usize % keys] = true;
    let valid: Vec<usize> = (0..keys).filter(|&j| mask[j]).collect();
    let w = attend(&q, &k, &eye, &mask).unwrap();
    for i in 0..queries {
        let row = w.row(i);
        sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
        for j in (0..keys).filter(|&j| !mask[j]) {
            masked = masked.max(row[j].abs());
        }
        let expect = sqrt_scaled_weights(q.row(i), &k, 0..keys, &valid);
        scale_err = scale_err.max(diff(&valid.iter().map(|&j| row[j]).collect::<Vec<_>>(), &expect));
    }

    let d = heads * 3;
    let (q, k, v) = (random_tensor(&mut rng, queries, d), random_tensor(&mut rng, keys, d), random_tensor(&mut rng, keys, d));
    let mut sets = KeySets::new();
    let mut lists = Vec::new();
    for i in 0..queries {
        let mut l: Vec<usize> = (0..keys).filter(|_| rng.random_bool(0.5)).collect();
        if l.is_empty() {
            l.push(i % keys);
        }
        sets.push(l.iter().copied());
        lists.push(l);
    }
    let mut rec = ComputationRecord::new();
    let (qv, kv, vv) = (rec.constant(q.clone()), rec.constant(k.clone()), rec.constant(v));
    let a = rec.attention(qv, kv, vv, heads, sets).unwrap();
    let trace = rec.attention_trace(a).unwrap();
    for h in 0..heads {
        for (i, l) in lists.iter().enumerate() {
            let row = trace.row(h, i);
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            let cols = h * 3..(h + 1) * 3;
            scale_err = scale_err.max(diff(row, &sqrt_scaled_weights(&q.row(i)[cols.clone()], &k, cols, l)));
        }
    }
    (sum_err, masked, scale_err)
}

/// Hand `T x d`, objects `(T*N) x d` with random rows in null slots too.
pub struct RegionFixture {
    pub hand: Tensor<f64>,
    pub objects: Tensor<f64>,
    pub mask: Vec<bool>,
    pub tracks: Vec<Option<u64>>,
    pub time: usize,
    pub slots: usize,
}

impl RegionFixture {
    pub fn random(rng: &mut ChaCha8Rng, time: usize, slots: usize, d: usize) -> Self {
        let hand = random_tensor(rng, time, d);
        let objects = random_tensor(rng, time * slots, d);
        let mask = random_mask(rng, time, slots);
        let tracks = (0..time * slots)
            .map(|_| if rng.random_bool(0.2) { None } else { Some(rng.random_range(0..3)) })
            .collect();
        Self { hand, objects, mask, tracks, time, slots }
    }

    pub fn tokens(&self, rec: &mut ComputationRecord<f64>) -> RegionTokens {
        RegionTokens {
            hand: rec.constant(self.hand.clone()),
            objects: rec.constant(self.objects.clone()),
            mask: self.mask.clone(),
            tracks: self.tracks.clone(),
            time: self.time,
            slots: self.slots,
        }
    }
}

pub fn interaction_store(variant: InteractionVariant, heads: usize, d: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, InteractionParams) {
    let ip = InteractionParams::new(variant, heads);
    let mut store = ParamStore::new();
    ip.init(&mut store, d, rng).unwrap();
    (store, ip)
}

pub fn sca_output(store: &ParamStore<f64>, ip: &InteractionParams, f: &RegionFixture) -> Tensor<f64> {
    let mut rec = ComputationRecord::new();
    let rt = f.tokens(&mut rec);
    let out = sca(&mut rec, store, &rt, ip, false).unwrap();
    rec.value(out.tokens).clone()
}

pub fn sca_error(seed: u64, time: usize, slots: usize, d: usize, heads: usize) -> f64 {
    let mut rng = rng(seed);
    let (store, ip) = interaction_store(InteractionVariant::Sca, heads, d, &mut rng);
    let f = RegionFixture::random(&mut rng, time, slots, d);
    let got = sca_output(&store, &ip, &f);
    max_abs_diff(&oracle::sca(&store, heads, &mat(&f.hand), &mat(&f.objects), &f.mask, slots), &got)
}

pub fn sot_output(store: &ParamStore<f64>, ip: &InteractionParams, f: &RegionFixture) -> Tensor<f64> {
    let mut rec = ComputationRecord::new();
    let rt = f.tokens(&mut rec);
    let out = sot(&mut rec, store, &rt, ip).unwrap();
    rec.value(out.tokens).clone()
}

pub fn sot_error(seed: u64, time: usize, slots: usize, d: usize, heads: usize) -> f64 {
    let mut rng = rng(seed);
    let (store, ip) = interaction_store(InteractionVariant::Sot, heads, d, &mut rng);
    let f = RegionFixture::random(&mut rng, time, slots, d);
    let got = sot_output(&store, &ip, &f);
    let want = oracle::sot(&store, heads, &mat(&f.hand), &mat(&f.objects), &f.mask, &f.tracks, slots);
    max_abs_diff(&want, &got)
}

pub const CELL: usize = 8;

pub fn random_box(rng: &mut ChaCha8Rng, t: usize, rows: usize, cols: usize) -> BoundingBox {
    let (w, h) = ((cols * CELL) as f32, (rows * CELL) as f32);
    let x1 = rng.random_range(0.0..w - 3.0);
    let y1 = rng.random_range(0.0..h - 3.0);
    let x2 = rng.random_range(x1 + 2.0..=w);
    let y2 = rng.random_range(y1 + 2.0..=h);
    BoundingBox::new(t, BoxKind::Hand, x1, y1, x2, y2)
}

pub fn ub_error(seed: u64, time: usize, rows: usize, cols: usize, d: usize, heads: usize) -> f64 {
    let mut rng = rng(seed);
    let (mut store, ip) = interaction_store(InteractionVariant::Ub, heads, d, &mut rng);
    let head = RoiHeadParams::new("roi", 2);
    head.init(&mut store, d, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let dims = GridDims { time, rows, cols };
    let grid = random_tensor(&mut rng, dims.tokens(), d);
    let boxes: Vec<BoundingBox> = (0..time).map(|t| random_box(&mut rng, t, rows, cols)).collect();
    let tubelet = Tubelet { time: 1, height: CELL, width: CELL };
    let mut rec = ComputationRecord::new();
    let x = rec.constant(grid.clone());
    let out = ub(&mut rec, &store, x, dims, tubelet, &boxes, &head, &ip).unwrap();
    let corners: Vec<[f64; 4]> =
        boxes.iter().map(|b| [b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64]).collect();
    let cell = (CELL as f64, CELL as f64);
    let want = oracle::ub(&store, heads, &mat(&grid), rows, cols, cell, &corners, 2);
    max_abs_diff(&want, rec.value(out.tokens))
}

pub fn trajectory_store(prefix: &str, heads: usize, causal: bool, d: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, TrajectoryParams) {
    let tp = TrajectoryParams::new(prefix, heads, causal);
    let mut store = ParamStore::new();
    tp.init(&mut store, d, rng).unwrap();
    (store, tp)
}

#[allow(clippy::too_many_arguments)]
pub fn trajectory_error(seed: u64, time: usize, rows: usize, cols: usize, d: usize, heads: usize, queries: usize, causal: bool) -> f64 {
    let mut rng = rng(seed);
    let (store, tp) = trajectory_store("traj", heads, causal, d, &mut rng);
    let dims = GridDims { time, rows, cols };
    let q = random_tensor(&mut rng, queries, d);
    let ctx = random_tensor(&mut rng, dims.tokens(), d);
    let frames: Vec<usize> = (0..queries).map(|_| rng.random_range(0..time)).collect();
    let mut rec = ComputationRecord::new();
    let (qv, cv) = (rec.constant(q.clone()), rec.constant(ctx.clone()));
    let out = trajectory_attend(&mut rec, &store, &tp, qv, &frames, cv, dims).unwrap();
    let want = oracle::trajectory(&store, "traj", heads, causal, &mat(&q), &frames, &mat(&ctx), dims.spatial());
    max_abs_diff(&want, rec.value(out.out))
}

#[allow(clippy::too_many_arguments)]
pub fn tca_error(seed: u64, time: usize, rows: usize, cols: usize, slots: usize, d: usize, heads: usize, residual: bool) -> f64 {
    let mut rng = rng(seed);
    let (store, tp) = trajectory_store("tca", heads, false, d, &mut rng);
    let dims = GridDims { time, rows, cols };
    let per_frame = slots + 1;
    let inter = random_tensor(&mut rng, time * per_frame, d);
    let video = random_tensor(&mut rng, dims.tokens(), d);
    let mask = random_mask(&mut rng, time, per_frame);
    let mut rec = ComputationRecord::new();
    let tokens = InteractionTokens { tokens: rec.constant(inter.clone()), mask: mask.clone(), time, per_frame };
    let v = rec.constant(video.clone());
    let (out, _) = tca(&mut rec, &store, &tp, &tokens, v, dims, residual).unwrap();
    let want = oracle::tca(&store, heads, false, residual, &mat(&inter), &mask, per_frame, &mat(&video), dims.spatial());
    max_abs_diff(&want, rec.value(out.tokens))
}

pub fn icv_store(heads: usize, d: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, AttentionParams) {
    let params = AttentionParams::new("icv.attn", heads);
    let mut store = ParamStore::new();
    params.init(&mut store, d, rng).unwrap();
    store.init_const("icv.norm.scale", &[d], 1.0);
    store.init_const("icv.norm.shift", &[d], 0.0);
    randomize(&mut store, rng);
    (store, params)
}

pub fn icv_error(seed: u64, time: usize, spatial: usize, slots: usize, d: usize, heads: usize) -> f64 {
    let mut rng = rng(seed);
    let (store, params) = icv_store(heads, d, &mut rng);
    let per_frame = slots + 1;
    let inter = random_tensor(&mut rng, time * per_frame, d);
    let video = random_tensor(&mut rng, time * spatial, d);
    let mask = random_mask(&mut rng, time, per_frame);
    let mut rec = ComputationRecord::new();
    let tokens = InteractionTokens { tokens: rec.constant(inter.clone()), mask: mask.clone(), time, per_frame };
    let v = rec.constant(video.clone());
    let (fused, _) = icv(&mut rec, &store, &params, &tokens, v).unwrap();
    max_abs_diff(&oracle::icv(&store, heads, &mat(&inter), &mask, &mat(&video)), rec.value(fused))
}

pub fn block_store(heads: usize, d: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, BlockParams) {
    let bp = BlockParams::new("blocks.0", heads);
    let mut store = ParamStore::new();
    bp.init(&mut store, d, rng).unwrap();
    randomize(&mut store, rng);
    (store, bp)
}

#[allow(clippy::too_many_arguments)]
pub fn backbone_error(seed: u64, time: usize, rows: usize, cols: usize, d: usize, heads: usize, n_global: usize) -> f64 {
    let mut rng = rng(seed);
    let (store, bp) = block_store(heads, d, &mut rng);
    let dims = GridDims { time, rows, cols };
    let x = random_tensor(&mut rng, n_global + dims.tokens(), d);
    let mut rec = ComputationRecord::new();
    let xv = rec.constant(x.clone());
    let out = backbone_block(&mut rec, &store, &bp, xv, n_global, dims).unwrap();
    let want = oracle::backbone_block(&store, "blocks.0", heads, &mat(&x), n_global, dims.spatial());
    max_abs_diff(&want, rec.value(out.out))
}

/// Every library block against its loop oracle over [`SWEEP`]; `(case, max |diff|)`.
pub fn oracle_sweep(seed: u64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, &(t, r, c, n, d, h)) in SWEEP.iter().enumerate() {
        let s = seed * 1000 + k as u64;
        let tag = format!("T={t} S={} N={n} d={d} heads={h}", r * c);
        out.push((format!("mha {tag}"), mha_error(s, t * (n + 1), r * c * t, d, h)));
        out.push((format!("sca {tag}"), sca_error(s, t, n, d, h)));
        out.push((format!("sot {tag}"), sot_error(s, t, n, d, h)));
        out.push((format!("ub {tag}"), ub_error(s, t, r, c, d, h)));
        for causal in [false, true] {
            out.push((format!("trajectory causal={causal} {tag}"), trajectory_error(s, t, r, c, d, h, t * (n + 1), causal)));
        }
        for residual in [false, true] {
            out.push((format!("tca residual={residual} {tag}"), tca_error(s, t, r, c, n, d, h, residual)));
        }
        out.push((format!("icv {tag}"), icv_error(s, t, r * c, n, d, h)));
        for g in [0, 1, 3] {
            out.push((format!("backbone globals={g} {tag}"), backbone_error(s, t, r, c, d, h, g)));
        }
    }
    out
}

/// SCA outputs before and after shuffling the object slots of every frame:
/// largest change of a hand token and largest mismatch of the permuted object tokens.
pub fn sca_permutation_error(seed: u64, time: usize, slots: usize, d: usize, heads: usize) -> (f64, f64) {
    let mut rng = rng(seed);
    let (store, ip) = interaction_store(InteractionVariant::Sca, heads, d, &mut rng);
    let base = RegionFixture::random(&mut rng, time, slots, d);
    let mut perm_rows = Vec::new();
    for t in 0..time {
        let mut p: Vec<usize> = (0..slots).collect();
        p.shuffle(&mut rng);
        perm_rows.extend(p.into_iter().map(|i| t * slots + i));
    }
    let objects: Vec<f64> = perm_rows.iter().flat_map(|&r| base.objects.row(r).to_vec()).collect();
    let shuffled = RegionFixture {
        hand: base.hand.clone(),
        objects: Tensor::new(vec![time * slots, d], objects).unwrap(),
        mask: perm_rows.iter().map(|&r| base.mask[r]).collect(),
        tracks: perm_rows.iter().map(|&r| base.tracks[r]).collect(),
        time,
        slots,
    };
    let a = sca_output(&store, &ip, &base);
    let b = sca_output(&store, &ip, &shuffled);
    let k = slots + 1;
    let mut hand: f64 = 0.0;
    let mut objs: f64 = 0.0;
    for t in 0..time {
        hand = hand.max(diff(a.row(t * k), b.row(t * k)));
        for (j, &r) in perm_rows[t * slots..(t + 1) * slots].iter().enumerate() {
            let i = r - t * slots;
            objs = objs.max(diff(a.row(t * k + 1 + i), b.row(t * k + 1 + j)));
        }
    }
    (hand, objs)
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Small end-to-end configuration on the default 8 x 32 x 32 clips.
pub fn small_config(d: usize, heads: usize, objects: usize) -> InAViTConfig {
    InAViTConfig {
        tokenizer: TokenizerConfig { dim: d, ..TokenizerConfig::default() },
        objects,
        heads,
        depth: 1,
        ..InAViTConfig::default()
    }
}

pub fn episode_input(cfg: &InAViTConfig, seed: u64) -> (ClipInput<f64>, usize) {
    let e = generate_episode(&SynthConfig::default(), seed).unwrap();
    let input = ClipInput::<f32>::prepare(&e.clip, &e.detections, cfg).unwrap();
    (input.cast(), e.label)
}

/// Largest logit change when `extra` null slots are appended to every position.
pub fn null_slot_shift(cfg: &InAViTConfig, seed: u64, extra: usize) -> f64 {
    let model = InAViT::new(cfg.clone()).unwrap();
    let params: ParamStore<f64> = model.init_params(seed).unwrap();
    let (input, _) = episode_input(cfg, seed);
    let a = model.logits(&params, &input).unwrap();
    let b = model.logits(&params, &input.with_null_slots(extra)).unwrap();
    diff(&a, &b)
}

/// Shapes of the ICV output and of the video tokens it was given.
pub fn icv_shape(time: usize, spatial: usize, slots: usize, d: usize, heads: usize, seed: u64, empty: bool) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng(seed);
    let (store, params) = icv_store(heads, d, &mut rng);
    let per_frame = slots + 1;
    let inter = random_tensor(&mut rng, time * per_frame, d);
    let video = random_tensor(&mut rng, time * spatial, d);
    let mask = if empty { vec![false; time * per_frame] } else { random_mask(&mut rng, time, per_frame) };
    let mut rec = ComputationRecord::new();
    let tokens = InteractionTokens { tokens: rec.constant(inter), mask, time, per_frame };
    let v = rec.constant(video);
    let (fused, _) = icv(&mut rec, &store, &params, &tokens, v).unwrap();
    (rec.value(fused).shape().to_vec(), rec.value(v).shape().to_vec())
}
