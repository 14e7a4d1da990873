//! The full network: tokens, interaction tokens, context infusion, the
//! interaction-centric video representation, the backbone and the classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::interaction::{
    model_interactions, ub, union_box, InteractionInputs, InteractionParams, InteractionTokens, InteractionVariant,
};
use crate::numerics::{AttentionParams, ComputationRecord, KeySets, ParamStore, Real, Tensor, Var};
use crate::roi::{aggregate_blocks, associate_tracks, build_region_tokens, select_regions, BoundingBox, FrameRegions, RoiHeadParams};
use crate::tokenizer::{add_positional, cuboids, patchify, GridDims, TokenizerConfig};
use crate::trajectory::{backbone_block, layer_norm, tca, BlockOutput, BlockParams, TrajectoryOutput, TrajectoryParams};

/// Which interaction tokens survive into context infusion and fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSubset {
    #[default]
    All,
    HandOnly,
    ObjectOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InAViTConfig {
    pub tokenizer: TokenizerConfig,
    /// Object slots per temporal position.
    pub objects: usize,
    /// `None` runs the backbone alone.
    pub interaction: Option<InteractionVariant>,
    pub context_infusion: bool,
    /// Add the context infusion to the interaction tokens instead of replacing them.
    pub tca_residual: bool,
    pub icv: bool,
    pub subset: TokenSubset,
    pub heads: usize,
    pub depth: usize,
    pub classes: usize,
    pub causal: bool,
    /// Frames between the last observed frame and the action.
    pub anticipation_gap: usize,
    pub roi_grid: usize,
    pub iou_threshold: f32,
}

impl Default for InAViTConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            objects: 2,
            interaction: Some(InteractionVariant::Sca),
            context_infusion: true,
            tca_residual: true,
            icv: true,
            subset: TokenSubset::All,
            heads: 4,
            depth: 2,
            classes: 8,
            causal: false,
            anticipation_gap: 4,
            roi_grid: 2,
            iou_threshold: 0.1,
        }
    }
}

impl InAViTConfig {
    /// 16 frames at 224x224, 12 heads, 12 blocks, 4 objects per frame.
    pub fn full_scale(classes: usize) -> Self {
        Self { tokenizer: TokenizerConfig::full_scale(), objects: 4, heads: 12, depth: 12, classes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.objects == 0 {
            return Err(Error::Config("need at least one object slot".into()));
        }
        if self.heads == 0 || !self.tokenizer.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.tokenizer.dim)));
        }
        if self.roi_grid == 0 {
            return Err(Error::Config("RoI grid must be at least 1".into()));
        }
        if self.subset != TokenSubset::All && !matches!(self.interaction, Some(InteractionVariant::Sca | InteractionVariant::Sot)) {
            return Err(Error::Config("hand-only/object-only subsets need SCA or SOT".into()));
        }
        Ok(())
    }

    /// Short row name such as `SCA+CI+ICV` or `baseline`.
    pub fn label(&self) -> String {
        let Some(v) = self.interaction else {
            return "baseline".into();
        };
        let mut s = v.label().to_string();
        match self.subset {
            TokenSubset::All => {}
            TokenSubset::HandOnly => s.push_str("(hand)"),
            TokenSubset::ObjectOnly => s.push_str("(object)"),
        }
        if self.context_infusion {
            s.push_str("+CI");
        }
        if self.icv {
            s.push_str("+ICV");
        }
        s
    }
}

/// Per-clip inputs that do not depend on parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput<F> {
    /// `(T*S) x patch_len` cuboid rows.
    pub cuboids: Tensor<F>,
    pub regions: Vec<FrameRegions>,
    /// Hand/nearest-object union box per temporal position.
    pub union_boxes: Vec<BoundingBox>,
}

impl<F: Real> ClipInput<F> {
    /// Tokenizes `clip` (`frames x H x W x C`) and turns per-pixel-frame
    /// detections into per-temporal-position regions: greedy IoU tracking,
    /// per-block averaging, then the `N` objects nearest the hand.
    pub fn prepare(clip: &Tensor<F>, detections: &[Vec<BoundingBox>], cfg: &InAViTConfig) -> Result<Self> {
        let tc = &cfg.tokenizer;
        if detections.len() != tc.frames {
            return Err(shape_err("prepare", format!("{} detection frames for {} frames", detections.len(), tc.frames)));
        }
        let cuboids = cuboids(clip, tc)?;
        let tracked = associate_tracks(detections, cfg.iou_threshold);
        let blocks = aggregate_blocks(&tracked, tc.tubelet.time);
        let regions = select_regions(&blocks, None, cfg.objects, tc.width as f32, tc.height as f32);
        let union_boxes = regions
            .iter()
            .map(|r| {
                let objs: Vec<BoundingBox> = r.objects.iter().flatten().cloned().collect();
                union_box(&r.hand, &objs)
            })
            .collect();
        Ok(Self { cuboids, regions, union_boxes })
    }

    /// Appends `extra` null slots to every temporal position.
    pub fn with_null_slots(&self, extra: usize) -> Self {
        let mut out = self.clone();
        for r in &mut out.regions {
            r.objects.extend(std::iter::repeat_n(None, extra));
        }
        out
    }

    pub fn cast<G: Real>(&self) -> ClipInput<G> {
        ClipInput { cuboids: self.cuboids.cast(), regions: self.regions.clone(), union_boxes: self.union_boxes.clone() }
    }
}

/// Nodes of one forward pass, kept for inspection and attention export.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `1 x C`.
    pub logits: Var,
    pub dims: GridDims,
    pub interactions: Option<InteractionTokens>,
    pub infused: Option<InteractionTokens>,
    pub tca: Option<TrajectoryOutput>,
    /// ICV attention node; queries are the video tokens, key `j < n` is the
    /// `j`-th valid interaction token and key `n + i` is video token `i`.
    pub icv: Option<Var>,
    pub icv_interaction_rows: Vec<usize>,
    pub blocks: Vec<BlockOutput>,
    /// Rows ahead of the grid in the backbone sequence (cls plus appended tokens).
    pub n_global: usize,
}

/// Architecture handle: configuration plus the parameter naming scheme.
#[derive(Clone, Debug)]
pub struct InAViT {
    pub cfg: InAViTConfig,
    pub roi: RoiHeadParams,
    pub interaction: Option<InteractionParams>,
    pub tca: TrajectoryParams,
    pub icv: AttentionParams,
    pub blocks: Vec<BlockParams>,
}

impl InAViT {
    pub fn new(cfg: InAViTConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            roi: RoiHeadParams::new("roi", cfg.roi_grid),
            interaction: cfg.interaction.map(|v| InteractionParams::new(v, cfg.heads)),
            tca: TrajectoryParams::new("tca", cfg.heads, cfg.causal),
            icv: AttentionParams::new("icv.attn", cfg.heads),
            blocks: (0..cfg.depth).map(|i| BlockParams::new(format!("blocks.{i}"), cfg.heads)).collect(),
            cfg,
        })
    }

    fn uses_tca(&self) -> bool {
        self.interaction.is_some() && self.cfg.context_infusion
    }

    fn uses_icv(&self) -> bool {
        self.interaction.is_some() && self.cfg.icv
    }

    /// Seeded initialization of every parameter the configuration uses.
    pub fn init_params<F: Real>(&self, seed: u64) -> Result<ParamStore<F>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tc = &self.cfg.tokenizer;
        let (d, g) = (tc.dim, tc.grid());
        let bound = 1.0 / (d as f64).sqrt();
        let mut store = ParamStore::new();
        store.init_linear("patch.weight", tc.patch_len(), d, &mut rng);
        store.init_const("patch.bias", &[d], 0.0);
        store.init_uniform("pos.spatial", &[g.spatial(), d], bound, &mut rng);
        store.init_uniform("pos.temporal", &[g.time, d], bound, &mut rng);
        store.init_uniform("cls", &[1, d], bound, &mut rng);
        if let Some(ip) = &self.interaction {
            self.roi.init(&mut store, d, &mut rng)?;
            ip.init(&mut store, d, &mut rng)?;
        }
        if self.uses_tca() {
            self.tca.init(&mut store, d, &mut rng)?;
        }
        if self.uses_icv() {
            store.init_const("icv.norm.scale", &[d], 1.0);
            store.init_const("icv.norm.shift", &[d], 0.0);
            self.icv.init(&mut store, d, &mut rng)?;
        }
        for b in &self.blocks {
            b.init(&mut store, d, &mut rng)?;
        }
        store.init_const("head.norm.scale", &[d], 1.0);
        store.init_const("head.norm.shift", &[d], 0.0);
        store.init_linear("head.weight", d, self.cfg.classes, &mut rng);
        store.init_const("head.bias", &[self.cfg.classes], 0.0);
        Ok(store)
    }

    /// Checks that `store` holds exactly the parameters of this configuration with matching shapes.
    pub fn check_params<F: Real>(&self, store: &ParamStore<F>) -> Result<()> {
        let reference: ParamStore<f32> = self.init_params(0)?;
        for (name, t) in reference.iter() {
            let got = store.get(name)?;
            if got.shape() != t.shape() {
                return Err(shape_err("check_params", format!("{name}: {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
            return Err(Error::UnknownParam(extra.to_string()));
        }
        Ok(())
    }

    pub fn forward<F: Real>(
        &self,
        rec: &mut ComputationRecord<F>,
        store: &ParamStore<F>,
        input: &ClipInput<F>,
    ) -> Result<ForwardOutput> {
        let tc = &self.cfg.tokenizer;
        let dims = tc.grid();
        rec.set_label("patch");
        let rows = rec.constant(input.cuboids.clone());
        let (w, b) = (rec.param(store, "patch.weight")?, rec.param(store, "patch.bias")?);
        let grid = patchify(rec, rows, w, b, tc)?;
        rec.set_label("pos");
        let (sp, tp) = (rec.param(store, "pos.spatial")?, rec.param(store, "pos.temporal")?);
        let x = add_positional(rec, grid, sp, tp)?.tokens;

        let mut out = ForwardOutput {
            logits: x,
            dims,
            interactions: None,
            infused: None,
            tca: None,
            icv: None,
            icv_interaction_rows: Vec::new(),
            blocks: Vec::new(),
            n_global: 1,
        };
        let mut video = x;
        let mut extra: Option<Var> = None;
        if let Some(ip) = &self.interaction {
            rec.set_label("roi");
            let mut inter = if ip.variant == InteractionVariant::Ub {
                rec.set_label("interaction.ub");
                ub(rec, store, x, dims, tc.tubelet, &input.union_boxes, &self.roi, ip)?
            } else {
                let regions = build_region_tokens(rec, store, &self.roi, x, dims, tc.tubelet, &input.regions)?;
                rec.set_label(&format!("interaction.{}", ip.variant.label().to_lowercase()));
                let inputs = InteractionInputs {
                    regions: &regions,
                    tokens: x,
                    dims,
                    tubelet: tc.tubelet,
                    union_boxes: &input.union_boxes,
                    head: &self.roi,
                };
                model_interactions(rec, store, ip, &inputs)?
            };
            apply_subset(&mut inter, self.cfg.subset);
            out.interactions = Some(inter.clone());
            if self.uses_tca() {
                rec.set_label("tca");
                let (infused, trace) = tca(rec, store, &self.tca, &inter, x, dims, self.cfg.tca_residual)?;
                inter = infused;
                out.tca = trace;
            }
            out.infused = Some(inter.clone());
            let valid = inter.valid_rows();
            if self.uses_icv() {
                rec.set_label("icv");
                let (fused, attn) = icv(rec, store, &self.icv, &inter, x)?;
                video = fused;
                out.icv = Some(attn);
                out.icv_interaction_rows = valid;
            } else if !valid.is_empty() {
                extra = Some(rec.gather_rows(inter.tokens, valid)?);
            }
        }

        rec.set_label("cls");
        let cls = rec.param(store, "cls")?;
        let mut seq = vec![cls];
        seq.extend(extra);
        seq.push(video);
        let mut h = rec.concat_rows(&seq)?;
        out.n_global = rec.value(h).rows() - dims.tokens();
        for (i, bp) in self.blocks.iter().enumerate() {
            rec.set_label(&format!("blocks.{i}"));
            let bo = backbone_block(rec, store, bp, h, out.n_global, dims)?;
            h = bo.out;
            out.blocks.push(bo);
        }
        rec.set_label("head");
        let h = layer_norm(rec, store, "head.norm", h)?;
        let c = rec.gather_rows(h, vec![0])?;
        let w = rec.param(store, "head.weight")?;
        let b = rec.param(store, "head.bias")?;
        let z = rec.matmul(c, w)?;
        out.logits = rec.add_row(z, b)?;
        Ok(out)
    }

    /// Forward pass and loss; returns `(loss, logits, gradients)`.
    pub fn loss_and_grads<F: Real>(
        &self,
        store: &ParamStore<F>,
        input: &ClipInput<F>,
        label: usize,
    ) -> Result<(F, Vec<F>, ParamStore<F>)> {
        let mut rec = ComputationRecord::new();
        let out = self.forward(&mut rec, store, input)?;
        let loss = rec.cross_entropy(out.logits, label)?;
        let grads = rec.reverse_gradients_for(loss, store)?;
        Ok((rec.value(loss).data()[0], rec.value(out.logits).data().to_vec(), grads))
    }

    pub fn logits<F: Real>(&self, store: &ParamStore<F>, input: &ClipInput<F>) -> Result<Vec<F>> {
        let mut rec = ComputationRecord::new();
        let out = self.forward(&mut rec, store, input)?;
        Ok(rec.value(out.logits).data().to_vec())
    }
}

fn apply_subset(inter: &mut InteractionTokens, subset: TokenSubset) {
    let k = inter.per_frame;
    for (r, m) in inter.mask.iter_mut().enumerate() {
        let hand = r % k == 0;
        match subset {
            TokenSubset::All => {}
            TokenSubset::HandOnly => *m &= hand,
            TokenSubset::ObjectOnly => *m &= !hand,
        }
    }
}

/// Interaction-centric video representation.
///
/// The video tokens attend (pre-norm, residual) over the concatenation of the
/// valid interaction tokens and the video tokens; only the video positions are
/// kept, so the result has the shape of `video`. Returns the fused tokens and
/// the attention node.
pub fn icv<F: Real>(
    rec: &mut ComputationRecord<F>,
    store: &ParamStore<F>,
    params: &AttentionParams,
    interactions: &InteractionTokens,
    video: Var,
) -> Result<(Var, Var)> {
    let valid = interactions.valid_rows();
    let n_video = rec.value(video).rows();
    let joint = if valid.is_empty() {
        video
    } else {
        let inter = rec.gather_rows(interactions.tokens, valid.clone())?;
        rec.concat_rows(&[inter, video])?
    };
    let normed = layer_norm(rec, store, "icv.norm", joint)?;
    let q_rows: Vec<usize> = (valid.len()..valid.len() + n_video).collect();
    let queries = rec.gather_rows(normed, q_rows)?;
    let [wq, wk, wv, wo] = params.names().map(|n| rec.param(store, &n));
    let q = rec.matmul(queries, wq?)?;
    let k = rec.matmul(normed, wk?)?;
    let v = rec.matmul(normed, wv?)?;
    let attn = rec.attention(q, k, v, params.heads, KeySets::full(n_video, valid.len() + n_video))?;
    let o = rec.matmul(attn, wo?)?;
    Ok((rec.add(video, o)?, attn))
}

/// Stable `-log softmax(logits)[label]`.
pub fn cross_entropy<F: Real>(logits: &[F], label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<F>().ln();
    Ok(lse - logits[label])
}

/// Indices of the `k` largest logits, largest first; ties go to the lower index.
pub fn predict_topk<F: Real>(logits: &[F], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::TopKOutOfRange { k, classes: logits.len() });
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}
