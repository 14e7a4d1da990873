//! Attention export: stage-one trajectory weight maps of context infusion and
//! every backbone block, plus the ICV attention rows.

use inavit::model::{ClipInput, InAViT};
use inavit::numerics::{AttentionTrace, ComputationRecord, ParamStore, Var};
use inavit::tokenizer::GridDims;
use inavit::trajectory::TrajectoryOutput;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryQuery {
    /// Interaction-token row for `tca`, grid row `t*S + s` for backbone blocks.
    pub query: usize,
    /// Home frame `t` of the query.
    pub frame: usize,
    /// The frames `t'` visited, in order.
    pub reference_frames: Vec<usize>,
    /// `[head][j][s]`: weight of spatial token `s` of frame `reference_frames[j]`.
    pub weights: Vec<Vec<Vec<f32>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLayer {
    pub layer: String,
    pub queries: Vec<TrajectoryQuery>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcvRow {
    /// Video token row.
    pub query: usize,
    /// `[head][key]`; keys are the valid interaction tokens then the video tokens.
    pub weights: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcvExport {
    /// Interaction-token row behind each leading key.
    pub interaction_rows: Vec<usize>,
    pub video_tokens: usize,
    pub rows: Vec<IcvRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub grid: GridDims,
    pub heads: usize,
    pub logits: Vec<f32>,
    pub trajectory: Vec<TrajectoryLayer>,
    pub icv: Option<IcvExport>,
}

fn trace(rec: &ComputationRecord<f32>, v: Var) -> Result<AttentionTrace<'_, f32>> {
    rec.attention_trace(v).ok_or_else(|| HarnessError::Format("node is not an attention node".into()))
}

fn stage_one(
    rec: &ComputationRecord<f32>,
    layer: String,
    t: &TrajectoryOutput,
    queries: &[usize],
    frames: &[usize],
) -> Result<TrajectoryLayer> {
    let tr = trace(rec, t.stage1)?;
    let out = queries
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let refs: Vec<usize> = t.reference_frames[i].clone().collect();
            let weights = (0..tr.heads)
                .map(|h| (0..refs.len()).map(|j| tr.row(h, t.offsets[i] + j).to_vec()).collect())
                .collect();
            TrajectoryQuery { query: q, frame: frames[i], reference_frames: refs, weights }
        })
        .collect();
    Ok(TrajectoryLayer { layer, queries: out })
}

pub fn export_attention(model: &InAViT, params: &ParamStore<f32>, input: &ClipInput<f32>) -> Result<AttentionExport> {
    let mut rec = ComputationRecord::new();
    let out = model.forward(&mut rec, params, input)?;
    let dims = out.dims;
    let mut layers = Vec::new();
    if let (Some(t), Some(inter)) = (&out.tca, &out.interactions) {
        let rows = inter.valid_rows();
        let frames: Vec<usize> = rows.iter().map(|&r| inter.frame_of(r)).collect();
        layers.push(stage_one(&rec, "tca".into(), t, &rows, &frames)?);
    }
    let grid: Vec<usize> = (0..dims.tokens()).collect();
    let frames: Vec<usize> = grid.iter().map(|r| r / dims.spatial()).collect();
    for (i, b) in out.blocks.iter().enumerate() {
        layers.push(stage_one(&rec, format!("blocks.{i}"), &b.trajectory, &grid, &frames)?);
    }
    let icv = match out.icv {
        Some(v) => {
            let tr = trace(&rec, v)?;
            let rows = (0..dims.tokens())
                .map(|q| IcvRow { query: q, weights: (0..tr.heads).map(|h| tr.row(h, q).to_vec()).collect() })
                .collect();
            Some(IcvExport { interaction_rows: out.icv_interaction_rows.clone(), video_tokens: dims.tokens(), rows })
        }
        None => None,
    };
    Ok(AttentionExport {
        grid: dims,
        heads: model.cfg.heads,
        logits: rec.value(out.logits).data().to_vec(),
        trajectory: layers,
        icv,
    })
}
