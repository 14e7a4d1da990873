use rand::Rng;

use crate::error::{shape_err, Error, Result};

use super::record::{attention_scale, dot};
use super::{ComputationRecord, ParamStore, Real, Tensor, Var};

/// Per-query list of admissible key rows (compressed sparse rows).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeySets {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl KeySets {
    pub fn new() -> Self {
        Self { offsets: vec![0], indices: Vec::new() }
    }

    /// Every one of `queries` rows sees all `keys` rows.
    pub fn full(queries: usize, keys: usize) -> Self {
        let mut s = Self::new();
        for _ in 0..queries {
            s.push(0..keys);
        }
        s
    }

    /// Every query sees the keys whose mask entry is `true`.
    pub fn masked(queries: usize, mask: &[bool]) -> Self {
        let valid: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
        let mut s = Self::new();
        for _ in 0..queries {
            s.push(valid.iter().copied());
        }
        s
    }

    pub fn push(&mut self, keys: impl IntoIterator<Item = usize>) {
        self.indices.extend(keys);
        self.offsets.push(self.indices.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn range(&self, query: usize) -> (usize, usize) {
        (self.offsets[query], self.offsets[query + 1])
    }

    pub fn row(&self, query: usize) -> &[usize] {
        &self.indices[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Normalized exponential with max subtraction.
pub fn softmax<F: Real>(x: &[F]) -> Result<Vec<F>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<F: Real>(x: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v = *v / total;
    }
}

/// Single-head attention of projected queries over projected keys/values.
///
/// Both queries and keys are scaled by `d_h^{-1/4}`; masked keys get the
/// sentinel logit and therefore exactly zero weight.
pub fn attend<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    key_mask: &[bool],
) -> Result<Tensor<F>> {
    let (m, dh) = (q.rows(), q.cols());
    let n = k.rows();
    if k.cols() != dh || v.cols() != dh || v.rows() != n || key_mask.len() != n {
        return Err(shape_err(
            "attend",
            format!("q {:?} k {:?} v {:?} mask {}", q.shape(), k.shape(), v.shape(), key_mask.len()),
        ));
    }
    if !key_mask.iter().any(|&b| b) {
        return Err(Error::NoValidKeys { query: 0 });
    }
    let s = attention_scale::<F>(dh);
    let ks: Vec<Vec<F>> = (0..n).map(|j| k.row(j).iter().map(|x| *x * s).collect()).collect();
    let mut out = vec![F::zero(); m * dh];
    let mut logits = vec![F::zero(); n];
    for i in 0..m {
        let qs: Vec<F> = q.row(i).iter().map(|x| *x * s).collect();
        for j in 0..n {
            logits[j] = if key_mask[j] { dot(&qs, &ks[j]) } else { F::MASKED_LOGIT };
        }
        softmax_in_place(&mut logits);
        for j in 0..n {
            for (o, x) in out[i * dh..(i + 1) * dh].iter_mut().zip(v.row(j)) {
                *o += logits[j] * *x;
            }
        }
    }
    Tensor::new(vec![m, dh], out)
}

/// Names of one attention layer's projections inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub prefix: String,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(prefix: impl Into<String>, heads: usize) -> Self {
        Self { prefix: prefix.into(), heads }
    }

    pub fn name(&self, which: &str) -> String {
        format!("{}.{which}", self.prefix)
    }

    pub fn names(&self) -> [String; 4] {
        ["wq", "wk", "wv", "wo"].map(|w| self.name(w))
    }

    pub fn init<F: Real, R: Rng>(&self, store: &mut ParamStore<F>, dim: usize, rng: &mut R) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide width {dim}", self.heads)));
        }
        for name in self.names() {
            store.init_linear(&name, dim, dim, rng);
        }
        Ok(())
    }
}

/// Projects targets to queries and sources to keys/values, attends per head,
/// concatenates the heads and applies the output projection.
pub fn multi_head_attend<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    params: &AttentionParams,
    targets: Var,
    sources: Var,
    keys: KeySets,
) -> Result<Var> {
    let [wq, wk, wv, wo] = params.names().map(|n| rec.param(store, &n));
    let q = rec.matmul(targets, wq?)?;
    let k = rec.matmul(sources, wk?)?;
    let v = rec.matmul(sources, wv?)?;
    let a = rec.attention(q, k, v, params.heads, keys)?;
    rec.matmul(a, wo?)
}
