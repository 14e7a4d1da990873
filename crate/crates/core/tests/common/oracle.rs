//! Loop-level reference implementations over plain `Vec<Vec<f64>>` matrices.
//! Nothing here calls into the library's numerics; parameters are only read
//! out of the store by name.

use inavit::numerics::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.len(), b.rows(), "row count");
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols(), "column count");
        for (x, y) in row.iter().zip(b.row(i)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    store.get(name).unwrap_or_else(|_| panic!("missing {name}"))
}

pub fn matmul(x: &[Vec<f64>], w: &Tensor<f64>) -> Mat {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), n);
            (0..m).map(|c| (0..n).map(|r| row[r] * w.data()[r * m + c]).sum()).collect()
        })
        .collect()
}

fn add_bias(x: &Mat, b: &Tensor<f64>) -> Mat {
    x.iter().map(|row| row.iter().zip(b.data()).map(|(a, c)| a + c).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn layer_norm(x: &Mat, store: &ParamStore<f64>, prefix: &str) -> Mat {
    let scale = p(store, &format!("{prefix}.scale")).data();
    let shift = p(store, &format!("{prefix}.shift")).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) * inv * scale[c] + shift[c]).collect()
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Scaled dot-product attention per head on projected rows; query `i` sees
/// the key rows `keys[i]`.
pub fn heads_attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, keys: &[Vec<usize>]) -> Mat {
    let Some(d) = q.first().map(Vec::len) else {
        return Vec::new();
    };
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for (i, qi) in q.iter().enumerate() {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = keys[i]
                .iter()
                .map(|&j| cols.clone().map(|c| qi[c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&logits);
            for (&j, a) in keys[i].iter().zip(&w) {
                for c in cols.clone() {
                    out[i][c] += a * v[j][c];
                }
            }
        }
    }
    out
}

/// Projected multi-head attention with `{prefix}.wq/wk/wv/wo`.
pub fn mha(store: &ParamStore<f64>, prefix: &str, heads: usize, targets: &Mat, sources: &Mat, keys: &[Vec<usize>]) -> Mat {
    let q = matmul(targets, p(store, &format!("{prefix}.wq")));
    let k = matmul(sources, p(store, &format!("{prefix}.wk")));
    let v = matmul(sources, p(store, &format!("{prefix}.wv")));
    matmul(&heads_attend(&q, &k, &v, heads, keys), p(store, &format!("{prefix}.wo")))
}

fn all_keys(queries: usize, keys: usize) -> Vec<Vec<usize>> {
    vec![(0..keys).collect(); queries]
}

/// Spatial cross-attention: `T x (N+1)` rows, hand first in each frame, null slots zero.
pub fn sca(store: &ParamStore<f64>, heads: usize, hand: &Mat, objects: &Mat, mask: &[bool], slots: usize) -> Mat {
    let d = hand[0].len();
    let mut out = Vec::new();
    for (t, h) in hand.iter().enumerate() {
        let valid: Vec<usize> = (0..slots).filter(|&i| mask[t * slots + i]).collect();
        if valid.is_empty() {
            out.push(h.clone());
        } else {
            let src: Mat = valid.iter().map(|&i| objects[t * slots + i].clone()).collect();
            out.push(mha(store, "sca.hand", heads, &vec![h.clone()], &src, &all_keys(1, src.len())).remove(0));
        }
        for i in 0..slots {
            if !mask[t * slots + i] {
                out.push(vec![0.0; d]);
                continue;
            }
            let mut src = vec![h.clone()];
            src.extend(valid.iter().filter(|&&j| j != i).map(|&j| objects[t * slots + j].clone()));
            let q = vec![objects[t * slots + i].clone()];
            out.push(mha(store, "sca.object", heads, &q, &src, &all_keys(1, src.len())).remove(0));
        }
    }
    out
}

/// Per-track temporal self-attention; untracked slots form a track per slot index.
pub fn sot(store: &ParamStore<f64>, heads: usize, hand: &Mat, objects: &Mat, mask: &[bool], tracks: &[Option<u64>], slots: usize) -> Mat {
    let time = hand.len();
    let d = hand[0].len();
    let hand_out = mha(store, "sot.hand", heads, hand, hand, &all_keys(time, time));
    let mut out = Vec::new();
    for t in 0..time {
        out.push(hand_out[t].clone());
        for i in 0..slots {
            let r = t * slots + i;
            if !mask[r] {
                out.push(vec![0.0; d]);
                continue;
            }
            let peers: Mat = (0..time * slots)
                .filter(|&c| mask[c])
                .filter(|&c| match (tracks[r], tracks[c]) {
                    (Some(a), Some(b)) => a == b,
                    (None, None) => c % slots == i,
                    _ => false,
                })
                .map(|c| objects[c].clone())
                .collect();
            let q = vec![objects[r].clone()];
            out.push(mha(store, "sot.object", heads, &q, &peers, &all_keys(1, peers.len())).remove(0));
        }
    }
    out
}

fn tent(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// `g x g` bilinear samples of a box (pixel corners) on a `rows x cols` token
/// lattice of `cell_h x cell_w` pixel tokens, token centers at half-integers.
pub fn roi_cells(frame: &[Vec<f64>], rows: usize, cols: usize, cell: (f64, f64), bbox: [f64; 4], g: usize) -> Mat {
    let (ch, cw) = cell;
    let x1 = (bbox[0] / cw).clamp(0.0, cols as f64);
    let y1 = (bbox[1] / ch).clamp(0.0, rows as f64);
    let x2 = (bbox[2] / cw).clamp(0.0, cols as f64);
    let y2 = (bbox[3] / ch).clamp(0.0, rows as f64);
    let mut cells = Vec::new();
    for i in 0..g {
        for j in 0..g {
            let x = (x1 + (j as f64 + 0.5) * (x2 - x1) / g as f64).clamp(0.5, cols as f64 - 0.5);
            let y = (y1 + (i as f64 + 0.5) * (y2 - y1) / g as f64).clamp(0.5, rows as f64 - 0.5);
            let mut v = vec![0.0; frame[0].len()];
            for r in 0..rows {
                for c in 0..cols {
                    let w = tent(x - (c as f64 + 0.5)) * tent(y - (r as f64 + 0.5));
                    for (o, t) in v.iter_mut().zip(&frame[r * cols + c]) {
                        *o += w * t;
                    }
                }
            }
            cells.push(v);
        }
    }
    cells
}

/// Cell MLP (`fc1`, GELU, `fc2`) then the columnwise max over cells.
pub fn region_token(store: &ParamStore<f64>, prefix: &str, cells: &Mat) -> Vec<f64> {
    let h = add_bias(&matmul(cells, p(store, &format!("{prefix}.fc1.weight"))), p(store, &format!("{prefix}.fc1.bias")));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let h = add_bias(&matmul(&h, p(store, &format!("{prefix}.fc2.weight"))), p(store, &format!("{prefix}.fc2.bias")));
    (0..h[0].len()).map(|c| h.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max)).collect()
}

/// Union-box tokens pooled per temporal position, then self-attended over time.
#[allow(clippy::too_many_arguments)]
pub fn ub(
    store: &ParamStore<f64>,
    heads: usize,
    grid: &Mat,
    rows: usize,
    cols: usize,
    cell: (f64, f64),
    boxes: &[[f64; 4]],
    g: usize,
) -> Mat {
    let s = rows * cols;
    let u: Mat = boxes
        .iter()
        .enumerate()
        .map(|(t, b)| region_token(store, "roi", &roi_cells(&grid[t * s..(t + 1) * s], rows, cols, cell, *b, g)))
        .collect();
    mha(store, "ub.union", heads, &u, &u, &all_keys(u.len(), u.len()))
}

/// Two-stage trajectory attention of `queries` (home frames `frames`) over a
/// `(T*S)`-row context, including the output projection.
#[allow(clippy::too_many_arguments)]
pub fn trajectory(
    store: &ParamStore<f64>,
    prefix: &str,
    heads: usize,
    causal: bool,
    queries: &Mat,
    frames: &[usize],
    context: &Mat,
    spatial: usize,
) -> Mat {
    let time = context.len() / spatial;
    let w = |n: &str| p(store, &format!("{prefix}.{n}"));
    let q = matmul(queries, w("wq"));
    let k = matmul(context, w("wk"));
    let v = matmul(context, w("wv"));
    let mut out = Vec::new();
    for (i, &t) in frames.iter().enumerate() {
        let refs: Vec<usize> = if causal { (t..time).collect() } else { (0..time).collect() };
        let y: Mat = refs
            .iter()
            .map(|&tp| {
                let keys = vec![(tp * spatial..(tp + 1) * spatial).collect()];
                heads_attend(&vec![q[i].clone()], &k, &v, heads, &keys).remove(0)
            })
            .collect();
        let home = refs.iter().position(|&tp| tp == t).expect("home frame is a reference");
        let q2 = matmul(&vec![y[home].clone()], w("tq"));
        let k2 = matmul(&y, w("tk"));
        let v2 = matmul(&y, w("tv"));
        out.push(heads_attend(&q2, &k2, &v2, heads, &all_keys(1, y.len())).remove(0));
    }
    matmul(&out, w("wo"))
}

/// Context infusion of the valid interaction rows; masked rows pass through.
#[allow(clippy::too_many_arguments)]
pub fn tca(
    store: &ParamStore<f64>,
    heads: usize,
    causal: bool,
    residual: bool,
    inter: &Mat,
    mask: &[bool],
    per_frame: usize,
    video: &Mat,
    spatial: usize,
) -> Mat {
    let valid: Vec<usize> = (0..inter.len()).filter(|&r| mask[r]).collect();
    if valid.is_empty() {
        return inter.clone();
    }
    let q: Mat = valid.iter().map(|&r| inter[r].clone()).collect();
    let frames: Vec<usize> = valid.iter().map(|&r| r / per_frame).collect();
    let a = trajectory(store, "tca", heads, causal, &q, &frames, video, spatial);
    let mut out = inter.clone();
    for (k, &r) in valid.iter().enumerate() {
        out[r] = if residual { add(&vec![inter[r].clone()], &vec![a[k].clone()]).remove(0) } else { a[k].clone() };
    }
    out
}

/// Video tokens attending (pre-norm, residual) over valid interaction tokens and themselves.
pub fn icv(store: &ParamStore<f64>, heads: usize, inter: &Mat, mask: &[bool], video: &Mat) -> Mat {
    let mut joint: Mat = (0..inter.len()).filter(|&r| mask[r]).map(|r| inter[r].clone()).collect();
    let n = joint.len();
    joint.extend(video.iter().cloned());
    let normed = layer_norm(&joint, store, "icv.norm");
    let q = normed[n..].to_vec();
    let o = mha(store, "icv.attn", heads, &q, &normed, &all_keys(q.len(), normed.len()));
    add(video, &o)
}

/// Pre-norm block: trajectory self-attention for grid rows, plain attention
/// for the `n_global` leading rows, then a GELU MLP.
pub fn backbone_block(store: &ParamStore<f64>, prefix: &str, heads: usize, x: &Mat, n_global: usize, spatial: usize) -> Mat {
    let attn = format!("{prefix}.attn");
    let xn = layer_norm(x, store, &format!("{prefix}.norm1"));
    let grid = xn[n_global..].to_vec();
    let frames: Vec<usize> = (0..grid.len()).map(|r| r / spatial).collect();
    let mut mixed = mha(store, &attn, heads, &xn[..n_global].to_vec(), &xn, &all_keys(n_global, xn.len()));
    mixed.extend(trajectory(store, &attn, heads, false, &grid, &frames, &grid, spatial));
    let x1 = add(x, &mixed);
    let w = |n: &str| p(store, &format!("{prefix}.mlp.{n}"));
    let h = add_bias(&matmul(&layer_norm(&x1, store, &format!("{prefix}.norm2")), w("fc1.weight")), w("fc1.bias"));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let h = add_bias(&matmul(&h, w("fc2.weight")), w("fc2.bias"));
    add(&x1, &h)
}
