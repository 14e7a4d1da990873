//! Trajectory attention.
//!
//! Stage one pools, for every query and every reference frame `t'`, the
//! spatial tokens of `t'` into a trajectory token. Stage two attends along the
//! trajectory (temporal) dimension using the trajectory token of the query's
//! own frame as the query.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::interaction::InteractionTokens;
use crate::numerics::{ComputationRecord, KeySets, ParamStore, Real, Var};
use crate::tokenizer::GridDims;

/// Projection names of one trajectory attention layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajectoryParams {
    pub prefix: String,
    pub heads: usize,
    /// Restrict reference frames to `t' >= t`.
    pub causal: bool,
}

impl TrajectoryParams {
    pub fn new(prefix: impl Into<String>, heads: usize, causal: bool) -> Self {
        Self { prefix: prefix.into(), heads, causal }
    }

    pub fn name(&self, which: &str) -> String {
        format!("{}.{which}", self.prefix)
    }

    /// Stage-one query/key/value, stage-two query/key/value, output.
    pub fn names(&self) -> [String; 7] {
        ["wq", "wk", "wv", "tq", "tk", "tv", "wo"].map(|w| self.name(w))
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide width {dim}", self.heads)));
        }
        for n in self.names() {
            store.init_linear(&n, dim, dim, rng);
        }
        Ok(())
    }

    /// Reference frames visited by a query living at frame `t`.
    pub fn reference_frames(&self, t: usize, time: usize) -> std::ops::Range<usize> {
        if self.causal {
            t..time
        } else {
            0..time
        }
    }
}

/// Nodes of one trajectory attention evaluation.
#[derive(Clone, Debug)]
pub struct TrajectoryOutput {
    pub out: Var,
    /// Stage-one attention node; row `offsets[i] + j` is query `i` at its `j`-th reference frame.
    pub stage1: Var,
    pub stage2: Var,
    pub offsets: Vec<usize>,
    pub reference_frames: Vec<std::ops::Range<usize>>,
}

/// Both attention stages on already projected stage-one `q`, `k`, `v`.
/// Context rows `key_offset + t*S + s` hold the grid tokens.
#[allow(clippy::too_many_arguments)]
fn two_stage<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    params: &TrajectoryParams,
    q: Var,
    k: Var,
    v: Var,
    query_frames: &[usize],
    dims: GridDims,
    key_offset: usize,
) -> Result<TrajectoryOutput> {
    if dims.time == 0 || dims.spatial() == 0 {
        return Err(Error::Empty("trajectory context"));
    }
    let s = dims.spatial();
    let mut rep = Vec::new();
    let mut offsets = Vec::with_capacity(query_frames.len());
    let mut ranges = Vec::with_capacity(query_frames.len());
    let mut keys1 = KeySets::new();
    let mut diag = Vec::with_capacity(query_frames.len());
    for (i, &t) in query_frames.iter().enumerate() {
        if t >= dims.time {
            return Err(shape_err("trajectory", format!("query frame {t} of {}", dims.time)));
        }
        let range = params.reference_frames(t, dims.time);
        offsets.push(rep.len());
        for tp in range.clone() {
            if tp == t {
                diag.push(rep.len());
            }
            rep.push(i);
            keys1.push((0..s).map(|x| key_offset + tp * s + x));
        }
        ranges.push(range);
    }
    let q_rep = rec.gather_rows(q, rep.clone())?;
    let stage1 = rec.attention(q_rep, k, v, params.heads, keys1)?;

    let [tq, tk, tv] = ["tq", "tk", "tv"].map(|w| rec.param(store, &params.name(w)));
    let diag_tokens = rec.gather_rows(stage1, diag)?;
    let q2 = rec.matmul(diag_tokens, tq?)?;
    let k2 = rec.matmul(stage1, tk?)?;
    let v2 = rec.matmul(stage1, tv?)?;
    let mut keys2 = KeySets::new();
    for (i, r) in ranges.iter().enumerate() {
        keys2.push(offsets[i]..offsets[i] + r.len());
    }
    let stage2 = rec.attention(q2, k2, v2, params.heads, keys2)?;
    Ok(TrajectoryOutput { out: stage2, stage1, stage2, offsets, reference_frames: ranges })
}

/// Trajectory cross-attention of `queries` (each with its home frame) against a
/// `(T*S) x d` context grid.
pub fn trajectory_attend<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    params: &TrajectoryParams,
    queries: Var,
    query_frames: &[usize],
    context: Var,
    dims: GridDims,
) -> Result<TrajectoryOutput> {
    let ctx = rec.value(context);
    if ctx.rows() != dims.tokens() || dims.tokens() == 0 {
        return Err(shape_err("trajectory_attend", format!("context {:?} for {dims:?}", ctx.shape())));
    }
    if rec.value(queries).rows() != query_frames.len() {
        return Err(shape_err("trajectory_attend", "one home frame per query"));
    }
    let [wq, wk, wv] = ["wq", "wk", "wv"].map(|w| rec.param(store, &params.name(w)));
    let q = rec.matmul(queries, wq?)?;
    let k = rec.matmul(context, wk?)?;
    let v = rec.matmul(context, wv?)?;
    let mut res = two_stage(rec, store, params, q, k, v, query_frames, dims, 0)?;
    let wo = rec.param(store, &params.name("wo"))?;
    res.out = rec.matmul(res.out, wo)?;
    Ok(res)
}

/// Context-infused interaction tokens: every valid interaction token is
/// replaced by its trajectory cross-attention against the video tokens, or
/// has it added when `residual` is set. Masked tokens pass through.
pub fn tca<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    params: &TrajectoryParams,
    interactions: &InteractionTokens,
    video: Var,
    dims: GridDims,
    residual: bool,
) -> Result<(InteractionTokens, Option<TrajectoryOutput>)> {
    let valid = interactions.valid_rows();
    if valid.is_empty() {
        return Ok((interactions.clone(), None));
    }
    let frames: Vec<usize> = valid.iter().map(|&r| interactions.frame_of(r)).collect();
    let queries = rec.gather_rows(interactions.tokens, valid.clone())?;
    let res = trajectory_attend(rec, store, params, queries, &frames, video, dims)?;
    let refined = if residual { rec.add(queries, res.out)? } else { res.out };
    let both = rec.concat_rows(&[refined, interactions.tokens])?;
    let mut k = 0;
    let rows: Vec<usize> = interactions
        .mask
        .iter()
        .enumerate()
        .map(|(r, &m)| {
            if m {
                k += 1;
                k - 1
            } else {
                valid.len() + r
            }
        })
        .collect();
    let tokens = rec.gather_rows(both, rows)?;
    Ok((InteractionTokens { tokens, ..interactions.clone() }, Some(res)))
}

/// Pre-norm transformer block whose token mixer is self trajectory attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub prefix: String,
    pub attn: TrajectoryParams,
}

impl BlockParams {
    pub fn new(prefix: impl Into<String>, heads: usize) -> Self {
        let prefix = prefix.into();
        let attn = TrajectoryParams::new(format!("{prefix}.attn"), heads, false);
        Self { prefix, attn }
    }

    pub fn name(&self, which: &str) -> String {
        format!("{}.{which}", self.prefix)
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Result<()> {
        for n in ["norm1", "norm2"] {
            store.init_const(&self.name(&format!("{n}.scale")), &[dim], 1.0);
            store.init_const(&self.name(&format!("{n}.shift")), &[dim], 0.0);
        }
        self.attn.init(store, dim, rng)?;
        store.init_linear(&self.name("mlp.fc1.weight"), dim, 4 * dim, rng);
        store.init_const(&self.name("mlp.fc1.bias"), &[4 * dim], 0.0);
        store.init_linear(&self.name("mlp.fc2.weight"), 4 * dim, dim, rng);
        store.init_const(&self.name("mlp.fc2.bias"), &[dim], 0.0);
        Ok(())
    }
}

/// Nodes of one backbone block evaluation.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub trajectory: TrajectoryOutput,
    /// Plain attention of the leading (global) rows over all rows.
    pub global: Option<Var>,
}

pub(crate) fn layer_norm<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let scale = rec.param(store, &format!("{prefix}.scale"))?;
    let shift = rec.param(store, &format!("{prefix}.shift"))?;
    rec.layer_norm(x, scale, shift)
}

/// One backbone block over `n_global` leading rows (the classification token
/// and any appended tokens) followed by the `T*S` grid rows.
///
/// Grid rows use self trajectory attention over the grid; leading rows use
/// plain attention over every row.
pub fn backbone_block<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    block: &BlockParams,
    x: Var,
    n_global: usize,
    dims: GridDims,
) -> Result<BlockOutput> {
    let rows = rec.value(x).rows();
    if rows != n_global + dims.tokens() {
        return Err(shape_err("backbone_block", format!("{rows} rows for {n_global} + {dims:?}")));
    }
    let p = &block.attn;
    let xn = layer_norm(rec, store, &block.name("norm1"), x)?;
    let [wq, wk, wv] = ["wq", "wk", "wv"].map(|w| rec.param(store, &p.name(w)));
    let q = rec.matmul(xn, wq?)?;
    let k = rec.matmul(xn, wk?)?;
    let v = rec.matmul(xn, wv?)?;
    let frames: Vec<usize> = (0..dims.tokens()).map(|r| r / dims.spatial()).collect();
    let q_grid = rec.gather_rows(q, (n_global..rows).collect::<Vec<_>>())?;
    let traj = two_stage(rec, store, p, q_grid, k, v, &frames, dims, n_global)?;
    let (mixed, global) = if n_global > 0 {
        let q_glob = rec.gather_rows(q, (0..n_global).collect::<Vec<_>>())?;
        let g = rec.attention(q_glob, k, v, p.heads, KeySets::full(n_global, rows))?;
        (rec.concat_rows(&[g, traj.out])?, Some(g))
    } else {
        (traj.out, None)
    };
    let wo = rec.param(store, &p.name("wo"))?;
    let attn = rec.matmul(mixed, wo)?;
    let x = rec.add(x, attn)?;

    let xn = layer_norm(rec, store, &block.name("norm2"), x)?;
    let w1 = rec.param(store, &block.name("mlp.fc1.weight"))?;
    let b1 = rec.param(store, &block.name("mlp.fc1.bias"))?;
    let w2 = rec.param(store, &block.name("mlp.fc2.weight"))?;
    let b2 = rec.param(store, &block.name("mlp.fc2.bias"))?;
    let h = rec.matmul(xn, w1)?;
    let h = rec.add_row(h, b1)?;
    let h = rec.gelu(h)?;
    let h = rec.matmul(h, w2)?;
    let h = rec.add_row(h, b2)?;
    let out = rec.add(x, h)?;
    Ok(BlockOutput { out, trajectory: traj, global })
}
