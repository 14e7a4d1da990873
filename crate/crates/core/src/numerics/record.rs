//! Computation record: an append-only tape of primitive applications that
//! supports exact replay and reverse-mode differentiation.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

use super::attention::{softmax_in_place, KeySets};
use super::{ParamStore, Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`ComputationRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse row combination: output row `r` is `sum_j w_j * x[src_j]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMix {
    offsets: Vec<usize>,
    terms: Vec<(usize, f64)>,
}

impl RowMix {
    pub fn new() -> Self {
        Self { offsets: vec![0], terms: Vec::new() }
    }

    pub fn push_row(&mut self, terms: impl IntoIterator<Item = (usize, f64)>) {
        self.terms.extend(terms);
        self.offsets.push(self.terms.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.terms[self.offsets[r]..self.offsets[r + 1]]
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm { x: Var, scale: Var, shift: Var },
    Gather { x: Var, rows: Arc<[usize]> },
    Concat(Vec<Var>),
    Mix { x: Var, mix: Arc<RowMix> },
    GroupMax { x: Var, group: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, keys: Arc<KeySets> },
    CrossEntropy { logits: Var, label: usize },
    Sum(Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Concat(..) => "concat",
            Op::Mix { .. } => "mix",
            Op::GroupMax { .. } => "group_max",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Gelu(x) | Op::Sum(x) => vec![*x],
            Op::LayerNorm { x, scale, shift } => vec![*x, *scale, *shift],
            Op::Gather { x, .. } | Op::Mix { x, .. } | Op::GroupMax { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// One recorded primitive application, as exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEntry {
    pub kind: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
    pub label: Arc<str>,
}

#[derive(Clone, Copy, Debug)]
enum Fault {
    MatMulRhsScale(f64),
}

/// Attention probabilities saved by an attention node.
#[derive(Clone, Debug)]
pub struct AttentionTrace<'a, F> {
    pub heads: usize,
    pub keys: &'a KeySets,
    /// `[head][nnz]` in the key-set layout.
    pub weights: &'a [F],
}

impl<F: Real> AttentionTrace<'_, F> {
    pub fn row(&self, head: usize, query: usize) -> &[F] {
        let nnz = self.keys.nnz();
        let (lo, hi) = self.keys.range(query);
        &self.weights[head * nnz + lo..head * nnz + hi]
    }
}

/// Single-writer tape of primitive applications.
#[derive(Clone, Debug)]
pub struct ComputationRecord<F> {
    ops: Vec<Op<F>>,
    values: Vec<Tensor<F>>,
    saved: Vec<Vec<F>>,
    requires_grad: Vec<bool>,
    labels: Vec<Arc<str>>,
    leaf_names: Vec<Option<String>>,
    named: HashMap<String, Var>,
    label: Arc<str>,
    fault: Option<Fault>,
}

impl<F: Real> Default for ComputationRecord<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ComputationRecord<F> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            saved: Vec::new(),
            requires_grad: Vec::new(),
            labels: Vec::new(),
            leaf_names: Vec::new(),
            named: HashMap::new(),
            label: Arc::from("root"),
            fault: None,
        }
    }

    /// Names the layer subsequent nodes belong to (used in error reports).
    pub fn set_label(&mut self, label: &str) {
        self.label = Arc::from(label);
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn entries(&self) -> Vec<RecordEntry> {
        self.ops
            .iter()
            .enumerate()
            .map(|(i, op)| RecordEntry {
                kind: op.name(),
                inputs: op.inputs(),
                output: Var(i),
                label: self.labels[i].clone(),
            })
            .collect()
    }

    /// Test fixture: corrupts the right-hand matmul gradient by `factor`.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, factor: f64) {
        self.fault = Some(Fault::MatMulRhsScale(factor));
    }

    fn push_leaf(&mut self, value: Tensor<F>, name: Option<String>) -> Var {
        let requires = name.is_some();
        self.ops.push(Op::Leaf);
        self.values.push(value);
        self.saved.push(Vec::new());
        self.requires_grad.push(requires);
        self.labels.push(self.label.clone());
        self.leaf_names.push(name);
        Var(self.ops.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, None)
    }

    /// Named differentiable leaf. Registering the same name twice returns the first node.
    pub fn variable(&mut self, name: &str, value: Tensor<F>) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push_leaf(value, Some(name.to_string()));
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.named.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        Ok(self.variable(name, t))
    }

    fn push(&mut self, op: Op<F>) -> Result<Var> {
        let (value, saved) = eval(&op, &self.values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), label: self.label.to_string() });
        }
        let requires = op.inputs().iter().any(|v| self.requires_grad[v.0]);
        self.ops.push(op);
        self.values.push(value);
        self.saved.push(saved);
        self.requires_grad.push(requires);
        self.labels.push(self.label.clone());
        self.leaf_names.push(None);
        Ok(Var(self.ops.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        self.push(Op::Scale(x, factor))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    /// Row-wise layer normalization with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.push(Op::LayerNorm { x, scale, shift })
    }

    pub fn gather_rows(&mut self, x: Var, rows: impl Into<Arc<[usize]>>) -> Result<Var> {
        self.push(Op::Gather { x, rows: rows.into() })
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        self.push(Op::Concat(xs.to_vec()))
    }

    pub fn mix_rows(&mut self, x: Var, mix: impl Into<Arc<RowMix>>) -> Result<Var> {
        self.push(Op::Mix { x, mix: mix.into() })
    }

    /// Column-wise maximum over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        self.push(Op::GroupMax { x, group })
    }

    /// Multi-head scaled dot-product attention on already projected `q`, `k`, `v`.
    ///
    /// Query row `i` attends only to the key rows listed in `keys.row(i)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        keys: impl Into<Arc<KeySets>>,
    ) -> Result<Var> {
        self.push(Op::Attention { q, k, v, heads, keys: keys.into() })
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, label })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Saved attention weights of an attention node.
    pub fn attention_trace(&self, v: Var) -> Option<AttentionTrace<'_, F>> {
        match &self.ops[v.0] {
            Op::Attention { heads, keys, .. } => {
                Some(AttentionTrace { heads: *heads, keys, weights: &self.saved[v.0] })
            }
            _ => None,
        }
    }

    /// Smallest gap, over every group-max column in the record, between the
    /// largest entry and the largest entry below it; `None` without such
    /// columns. Exact duplicates are skipped: they come from identical rows
    /// and move together. Finite differences are only meaningful when the
    /// gap exceeds the step.
    pub fn group_max_margin(&self) -> Option<F> {
        let mut best: Option<F> = None;
        for op in &self.ops {
            let Op::GroupMax { x, group } = op else { continue };
            let xv = &self.values[x.0];
            let d = xv.cols();
            if *group < 2 {
                continue;
            }
            for o in 0..xv.rows() / group {
                for c in 0..d {
                    let col: Vec<F> = (0..*group).map(|r| xv.data()[(o * group + r) * d + c]).collect();
                    let top = col.iter().copied().fold(F::neg_infinity(), F::max);
                    let below = col.iter().copied().filter(|&v| v < top).fold(F::neg_infinity(), F::max);
                    if below.is_finite() {
                        let gap = top - below;
                        best = Some(best.map_or(gap, |b| b.min(gap)));
                    }
                }
            }
        }
        best
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<F>>> {
        let mut values: Vec<Tensor<F>> = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            let value = match op {
                Op::Leaf => self.values[i].clone(),
                _ => eval(op, &values)?.0,
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Reverse-mode gradients of the scalar `loss` for every named leaf.
    pub fn reverse_gradients(&self, loss: Var) -> Result<ParamStore<F>> {
        let n = self.values[loss.0].numel();
        if n != 1 {
            return Err(Error::NotScalar(n));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = ParamStore::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(name) = &self.leaf_names[i] {
                out.insert(name.clone(), Tensor::new(self.values[i].shape().to_vec(), g)?);
                continue;
            }
            self.backprop(i, &g, &mut grads)?;
        }
        for (name, &v) in &self.named {
            if v.0 <= loss.0 && !out.contains(name) {
                out.insert(name.clone(), Tensor::zeros(self.values[v.0].shape()));
            }
        }
        Ok(out)
    }

    /// Like [`Self::reverse_gradients`], with zero gradients for every store entry the
    /// loss does not touch.
    pub fn reverse_gradients_for(&self, loss: Var, store: &ParamStore<F>) -> Result<ParamStore<F>> {
        let mut grads = self.reverse_gradients(loss)?;
        for (name, t) in store.iter() {
            if !grads.contains(name) {
                grads.insert(name, Tensor::zeros(t.shape()));
            }
        }
        Ok(grads)
    }

    fn backprop(&self, node: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let vals = &self.values;
        let req = &self.requires_grad;
        let out = &vals[node];
        let saved = &self.saved[node];
        match &self.ops[node] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if req[a.0] {
                    // dA = G * B^T
                    let da = acc(grads, *a, m * k);
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        (g, n as isize, 1),
                        (bv.data(), 1, n as isize),
                        F::one(),
                        (da, k as isize, 1),
                    );
                }
                if req[b.0] {
                    let alpha = match self.fault {
                        Some(Fault::MatMulRhsScale(f)) => F::lit(f),
                        None => F::one(),
                    };
                    // dB = A^T * G
                    let db = acc(grads, *b, k * n);
                    F::gemm(
                        k,
                        m,
                        n,
                        alpha,
                        (av.data(), 1, k as isize),
                        (g, n as isize, 1),
                        F::one(),
                        (db, n as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if req[x.0] {
                        add_into(acc(grads, *x, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if req[a.0] {
                    let da = acc(grads, *a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(vals[b.0].data()) {
                        *d += *gi * *bi;
                    }
                }
                if req[b.0] {
                    let db = acc(grads, *b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(vals[a.0].data()) {
                        *d += *gi * *ai;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if req[a.0] {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if req[r.0] {
                    let n = vals[r.0].numel();
                    let dr = acc(grads, *r, n);
                    for row in g.chunks(n) {
                        add_into(dr, row);
                    }
                }
            }
            Op::Scale(x, f) => {
                if req[x.0] {
                    let dx = acc(grads, *x, g.len());
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += *gi * *f;
                    }
                }
            }
            Op::Gelu(x) => {
                if req[x.0] {
                    let dx = acc(grads, *x, g.len());
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(vals[x.0].data()) {
                        *d += *gi * gelu_grad(*xi);
                    }
                }
            }
            Op::LayerNorm { x, scale, shift } => {
                let d = vals[x.0].cols();
                let gamma = vals[scale.0].data();
                // saved: normalized rows followed by per-row reciprocal std
                let rows = g.len() / d;
                let (xhat, rstd) = saved.split_at(rows * d);
                if req[scale.0] || req[shift.0] {
                    let mut dg = vec![F::zero(); d];
                    let mut db = vec![F::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                            db[c] += g[r * d + c];
                        }
                    }
                    if req[scale.0] {
                        add_into(acc(grads, *scale, d), &dg);
                    }
                    if req[shift.0] {
                        add_into(acc(grads, *shift, d), &db);
                    }
                }
                if req[x.0] {
                    let dx = acc(grads, *x, g.len());
                    let inv_d = F::one() / F::lit(d as f64);
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..rows {
                        let mut mean_dxhat = F::zero();
                        let mut mean_dxhat_xhat = F::zero();
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gamma[c];
                            mean_dxhat += dxhat[c];
                            mean_dxhat_xhat += dxhat[c] * xhat[r * d + c];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        for c in 0..d {
                            dx[r * d + c] += rstd[r]
                                * (dxhat[c] - mean_dxhat - xhat[r * d + c] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Gather { x, rows } => {
                if req[x.0] {
                    let d = out.cols();
                    let dx = acc(grads, *x, vals[x.0].numel());
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut dx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for x in xs {
                    let n = vals[x.0].numel();
                    if req[x.0] {
                        add_into(acc(grads, *x, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Mix { x, mix } => {
                if req[x.0] {
                    let d = out.cols();
                    let dx = acc(grads, *x, vals[x.0].numel());
                    for r in 0..mix.len() {
                        let gr = &g[r * d..(r + 1) * d];
                        for &(src, w) in mix.row(r) {
                            let w = F::lit(w);
                            for (dv, gv) in dx[src * d..(src + 1) * d].iter_mut().zip(gr) {
                                *dv += w * *gv;
                            }
                        }
                    }
                }
            }
            Op::GroupMax { x, group } => {
                if req[x.0] {
                    let xv = &vals[x.0];
                    let d = xv.cols();
                    let dx = acc(grads, *x, xv.numel());
                    for o in 0..out.rows() {
                        for c in 0..d {
                            let best = argmax_in_group(xv.data(), o * group, *group, d, c);
                            dx[best * d + c] += g[o * d + c];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, keys } => {
                let (qv, kv, vv) = (&vals[q.0], &vals[k.0], &vals[v.0]);
                let d = qv.cols();
                let dh = d / heads;
                let s2 = attention_scale::<F>(dh).powi(2);
                let nnz = keys.nnz();
                let mut dq = vec![F::zero(); qv.numel()];
                let mut dk = vec![F::zero(); kv.numel()];
                let mut dv = vec![F::zero(); vv.numel()];
                let mut dl = Vec::new();
                for i in 0..qv.rows() {
                    let (lo, hi) = keys.range(i);
                    let ks = keys.row(i);
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &saved[h * nnz + lo..h * nnz + hi];
                        let go = &g[i * d + cols.start..i * d + cols.end];
                        dl.clear();
                        let mut dot_sum = F::zero();
                        for (&j, &pj) in ks.iter().zip(p) {
                            let vrow = &vv.data()[j * d + cols.start..j * d + cols.end];
                            let dp = dot(go, vrow);
                            dot_sum += pj * dp;
                            dl.push(dp);
                            let dvrow = &mut dv[j * d + cols.start..j * d + cols.end];
                            for (a, b) in dvrow.iter_mut().zip(go) {
                                *a += pj * *b;
                            }
                        }
                        let qrow = &qv.data()[i * d + cols.start..i * d + cols.end];
                        for ((&j, &pj), dlj) in ks.iter().zip(p).zip(dl.iter_mut()) {
                            *dlj = pj * (*dlj - dot_sum) * s2;
                            let krow = &kv.data()[j * d + cols.start..j * d + cols.end];
                            let dqrow = &mut dq[i * d + cols.start..i * d + cols.end];
                            for (a, b) in dqrow.iter_mut().zip(krow) {
                                *a += *dlj * *b;
                            }
                            let dkrow = &mut dk[j * d + cols.start..j * d + cols.end];
                            for (a, b) in dkrow.iter_mut().zip(qrow) {
                                *a += *dlj * *b;
                            }
                        }
                    }
                }
                for (x, gx) in [(q, dq), (k, dk), (v, dv)] {
                    if req[x.0] {
                        add_into(acc(grads, *x, gx.len()), &gx);
                    }
                }
            }
            Op::CrossEntropy { logits, label } => {
                if req[logits.0] {
                    let n = vals[logits.0].numel();
                    let dx = acc(grads, *logits, n);
                    for (c, (d, p)) in dx.iter_mut().zip(saved).enumerate() {
                        let target = if c == *label { F::one() } else { F::zero() };
                        *d += g[0] * (*p - target);
                    }
                }
            }
            Op::Sum(x) => {
                if req[x.0] {
                    let dx = acc(grads, *x, vals[x.0].numel());
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// Per-side scale `d_h^{-1/4}` applied to both queries and keys.
pub(crate) fn attention_scale<F: Real>(head_dim: usize) -> F {
    F::lit((head_dim as f64).powf(-0.25))
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

fn argmax_in_group<F: Real>(data: &[F], start: usize, group: usize, d: usize, c: usize) -> usize {
    let mut best = start;
    for r in start + 1..start + group {
        if data[r * d + c] > data[best * d + c] {
            best = r;
        }
    }
    best
}

fn same_shape<F: Real>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix<F: Real>(rows: usize, cols: usize, data: Vec<F>) -> Tensor<F> {
    Tensor::new(vec![rows, cols], data).expect("matrix extent")
}

fn eval<F: Real>(op: &Op<F>, vals: &[Tensor<F>]) -> Result<(Tensor<F>, Vec<F>)> {
    let none = Vec::new;
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (&vals[a.0], &vals[b.0]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            if b.rows() != k || b.shape().len() != 2 {
                return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut c = vec![F::zero(); m * n];
            F::gemm(
                m,
                k,
                n,
                F::one(),
                (a.data(), k as isize, 1),
                (b.data(), n as isize, 1),
                F::zero(),
                (&mut c, n as isize, 1),
            );
            (matrix(m, n, c), none())
        }
        Op::Add(a, b) => {
            let (a, b) = (&vals[a.0], &vals[b.0]);
            same_shape("add", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
            (Tensor::new(a.shape().to_vec(), data)?, none())
        }
        Op::Mul(a, b) => {
            let (a, b) = (&vals[a.0], &vals[b.0]);
            same_shape("mul", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
            (Tensor::new(a.shape().to_vec(), data)?, none())
        }
        Op::AddRow(a, r) => {
            let (a, r) = (&vals[a.0], &vals[r.0]);
            if a.cols() != r.numel() {
                return Err(shape_err("add_row", format!("{:?} + {:?}", a.shape(), r.shape())));
            }
            let n = r.numel();
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n.max(1)) {
                add_into(row, r.data());
            }
            (Tensor::new(a.shape().to_vec(), data)?, none())
        }
        Op::Scale(x, f) => {
            let x = &vals[x.0];
            let data = x.data().iter().map(|v| *v * *f).collect();
            (Tensor::new(x.shape().to_vec(), data)?, none())
        }
        Op::Gelu(x) => {
            let x = &vals[x.0];
            let data = x.data().iter().map(|v| gelu(*v)).collect();
            (Tensor::new(x.shape().to_vec(), data)?, none())
        }
        Op::LayerNorm { x, scale, shift } => {
            let (x, gamma, beta) = (&vals[x.0], &vals[scale.0], &vals[shift.0]);
            let d = x.cols();
            if gamma.numel() != d || beta.numel() != d {
                return Err(shape_err("layer_norm", format!("width {d}")));
            }
            let rows = x.rows();
            let eps = F::lit(LAYER_NORM_EPS);
            let inv_d = F::one() / F::lit(d as f64);
            let mut out = vec![F::zero(); rows * d];
            let mut saved = vec![F::zero(); rows * d + rows];
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().copied().sum::<F>() * inv_d;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_d;
                let rstd = F::one() / (var + eps).sqrt();
                for c in 0..d {
                    let xh = (row[c] - mean) * rstd;
                    saved[r * d + c] = xh;
                    out[r * d + c] = xh * gamma.data()[c] + beta.data()[c];
                }
                saved[rows * d + r] = rstd;
            }
            (Tensor::new(x.shape().to_vec(), out)?, saved)
        }
        Op::Gather { x, rows } => {
            let x = &vals[x.0];
            let d = x.cols();
            let n = x.rows();
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in rows.iter() {
                if r >= n {
                    return Err(shape_err("gather", format!("row {r} of {n}")));
                }
                data.extend_from_slice(x.row(r));
            }
            (matrix(rows.len(), d, data), none())
        }
        Op::Concat(xs) => {
            let d = vals[xs[0].0].cols();
            let mut data = Vec::new();
            for x in xs {
                let t = &vals[x.0];
                if t.cols() != d {
                    return Err(shape_err("concat", format!("width {} vs {d}", t.cols())));
                }
                data.extend_from_slice(t.data());
            }
            let rows = data.len() / d.max(1);
            (matrix(rows, d, data), none())
        }
        Op::Mix { x, mix } => {
            let x = &vals[x.0];
            let d = x.cols();
            let n = x.rows();
            let mut data = vec![F::zero(); mix.len() * d];
            for r in 0..mix.len() {
                let dst = &mut data[r * d..(r + 1) * d];
                for &(src, w) in mix.row(r) {
                    if src >= n {
                        return Err(shape_err("mix", format!("row {src} of {n}")));
                    }
                    let w = F::lit(w);
                    for (a, b) in dst.iter_mut().zip(x.row(src)) {
                        *a += w * *b;
                    }
                }
            }
            (matrix(mix.len(), d, data), none())
        }
        Op::GroupMax { x, group } => {
            let x = &vals[x.0];
            let d = x.cols();
            if *group == 0 || !x.rows().is_multiple_of(*group) {
                return Err(shape_err("group_max", format!("{} rows by {group}", x.rows())));
            }
            let groups = x.rows() / group;
            let mut data = vec![F::zero(); groups * d];
            for o in 0..groups {
                for c in 0..d {
                    let best = argmax_in_group(x.data(), o * group, *group, d, c);
                    data[o * d + c] = x.data()[best * d + c];
                }
            }
            (matrix(groups, d, data), none())
        }
        Op::Attention { q, k, v, heads, keys } => attention_forward(
            &vals[q.0],
            &vals[k.0],
            &vals[v.0],
            *heads,
            keys,
        )?,
        Op::CrossEntropy { logits, label } => {
            let x = &vals[logits.0];
            if *label >= x.numel() {
                return Err(Error::LabelOutOfRange { label: *label, classes: x.numel() });
            }
            let mut p = x.data().to_vec();
            softmax_in_place(&mut p);
            let max = x.data().iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + x.data().iter().map(|v| (*v - max).exp()).sum::<F>().ln();
            (Tensor::scalar(lse - x.data()[*label]), p)
        }
        Op::Sum(x) => (Tensor::scalar(vals[x.0].data().iter().copied().sum()), none()),
    })
}

fn attention_forward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    keys: &KeySets,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (m, d) = (q.rows(), q.cols());
    let n = k.rows();
    if k.cols() != d || v.cols() != d || v.rows() != n {
        return Err(shape_err(
            "attention",
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(shape_err("attention", format!("{heads} heads do not divide width {d}")));
    }
    if keys.len() != m {
        return Err(shape_err("attention", format!("{} key sets for {m} queries", keys.len())));
    }
    if let Some(&bad) = keys.indices().iter().find(|&&j| j >= n) {
        return Err(shape_err("attention", format!("key {bad} of {n}")));
    }
    let dh = d / heads;
    let s = attention_scale::<F>(dh);
    let qs: Vec<F> = q.data().iter().map(|x| *x * s).collect();
    let ks: Vec<F> = k.data().iter().map(|x| *x * s).collect();
    let nnz = keys.nnz();
    let mut probs = vec![F::zero(); heads * nnz];
    let mut out = vec![F::zero(); m * d];
    for i in 0..m {
        let row = keys.row(i);
        if row.is_empty() {
            return Err(Error::NoValidKeys { query: i });
        }
        let (lo, hi) = keys.range(i);
        for h in 0..heads {
            let c0 = h * dh;
            let qrow = &qs[i * d + c0..i * d + c0 + dh];
            let p = &mut probs[h * nnz + lo..h * nnz + hi];
            for (pj, &j) in p.iter_mut().zip(row) {
                *pj = dot(qrow, &ks[j * d + c0..j * d + c0 + dh]);
            }
            softmax_in_place(p);
            let orow = &mut out[i * d + c0..i * d + c0 + dh];
            for (&pj, &j) in p.iter().zip(row) {
                for (o, x) in orow.iter_mut().zip(&v.data()[j * d + c0..j * d + c0 + dh]) {
                    *o += pj * *x;
                }
            }
        }
    }
    Ok((matrix(m, d, out), probs))
}
