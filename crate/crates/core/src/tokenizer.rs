//! Tubelet tokenization of a clip into the spatio-temporal token grid.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{ComputationRecord, Real, Tensor, Var};

/// Tubelet extent `time x height x width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tubelet {
    pub time: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tubelet: Tubelet,
    pub dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            tubelet: Tubelet { time: 2, height: 8, width: 8 },
            dim: 32,
        }
    }
}

impl TokenizerConfig {
    /// 16 frames of 224x224 with 2x16x16 tubelets and width 768.
    pub fn full_scale() -> Self {
        Self {
            frames: 16,
            height: 224,
            width: 224,
            channels: 3,
            tubelet: Tubelet { time: 2, height: 16, width: 16 },
            dim: 768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.tubelet;
        for (axis, extent, patch) in [
            ("frames", self.frames, t.time),
            ("height", self.height, t.height),
            ("width", self.width, t.width),
        ] {
            if patch == 0 || extent == 0 || extent % patch != 0 {
                return Err(Error::Indivisible { axis, extent, patch });
            }
        }
        if self.channels == 0 || self.dim == 0 {
            return Err(Error::Config("channels and dim must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridDims {
        GridDims {
            time: self.frames / self.tubelet.time,
            rows: self.height / self.tubelet.height,
            cols: self.width / self.tubelet.width,
        }
    }

    /// Values per flattened cuboid.
    pub fn patch_len(&self) -> usize {
        self.tubelet.time * self.tubelet.height * self.tubelet.width * self.channels
    }
}

/// Token grid extents: temporal positions and the spatial `rows x cols` lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub time: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn spatial(&self) -> usize {
        self.rows * self.cols
    }

    pub fn tokens(&self) -> usize {
        self.time * self.spatial()
    }

    /// Row of token `(t, s)` in the flattened `(T*S) x d` layout.
    pub fn index(&self, t: usize, s: usize) -> usize {
        t * self.spatial() + s
    }

    /// Row-major spatial index of lattice cell `(row, col)`.
    pub fn spatial_index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }
}

/// Video tokens `X` stored as a `(T*S) x d` matrix plus an optional classification token.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub cls: Option<Var>,
    pub dims: GridDims,
}

impl TokenGrid {
    /// Number of tokens including the classification token when present.
    pub fn token_count(&self) -> usize {
        self.dims.tokens() + usize::from(self.cls.is_some())
    }
}

fn check_clip<F: Real>(clip: &Tensor<F>, cfg: &TokenizerConfig) -> Result<()> {
    cfg.validate()?;
    let want = [cfg.frames, cfg.height, cfg.width, cfg.channels];
    if clip.shape() != want {
        return Err(shape_err("patchify", format!("clip {:?}, expected {want:?}", clip.shape())));
    }
    Ok(())
}

/// Flattens a `T x H x W x C` clip into one row per cuboid, in
/// `(time, row, col, channel)` order within each cuboid.
pub fn cuboids<F: Real>(clip: &Tensor<F>, cfg: &TokenizerConfig) -> Result<Tensor<F>> {
    check_clip(clip, cfg)?;
    let g = cfg.grid();
    let tb = cfg.tubelet;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let src = clip.data();
    let mut out = Vec::with_capacity(src.len());
    for t in 0..g.time {
        for r in 0..g.rows {
            for q in 0..g.cols {
                for dt in 0..tb.time {
                    let f = t * tb.time + dt;
                    for dy in 0..tb.height {
                        let y = r * tb.height + dy;
                        let base = ((f * h + y) * w + q * tb.width) * c;
                        out.extend_from_slice(&src[base..base + tb.width * c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.tokens(), cfg.patch_len()], out)
}

/// Inverse of [`cuboids`].
pub fn uncuboids<F: Real>(patches: &Tensor<F>, cfg: &TokenizerConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    let g = cfg.grid();
    if patches.shape() != [g.tokens(), cfg.patch_len()] {
        return Err(shape_err("uncuboids", format!("{:?}", patches.shape())));
    }
    let tb = cfg.tubelet;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut out = vec![F::zero(); cfg.frames * h * w * c];
    let mut src = patches.data().chunks(tb.width * c);
    for t in 0..g.time {
        for r in 0..g.rows {
            for q in 0..g.cols {
                for dt in 0..tb.time {
                    let f = t * tb.time + dt;
                    for dy in 0..tb.height {
                        let y = r * tb.height + dy;
                        let base = ((f * h + y) * w + q * tb.width) * c;
                        let chunk = src.next().expect("cuboid count");
                        out[base..base + tb.width * c].copy_from_slice(chunk);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.frames, h, w, c], out)
}

/// Linear projection of the cuboid rows: `token(t, s) = cuboid(t, s) * W + b`.
pub fn patchify<F: Real>(
    rec: &mut ComputationRecord<F>,
    cuboid_rows: Var,
    projection: Var,
    bias: Var,
    cfg: &TokenizerConfig,
) -> Result<TokenGrid> {
    let dims = cfg.grid();
    let rows = rec.value(cuboid_rows);
    if rows.rows() != dims.tokens() || rows.cols() != cfg.patch_len() {
        return Err(shape_err("patchify", format!("cuboid rows {:?}", rows.shape())));
    }
    let x = rec.matmul(cuboid_rows, projection)?;
    let tokens = rec.add_row(x, bias)?;
    Ok(TokenGrid { tokens, cls: None, dims })
}

/// `x_st + e^s_s + e^t_t` with separate spatial (`S x d`) and temporal (`T x d`) tables.
pub fn add_positional<F: Real>(
    rec: &mut ComputationRecord<F>,
    grid: TokenGrid,
    spatial: Var,
    temporal: Var,
) -> Result<TokenGrid> {
    let d = grid.dims;
    let (sp, tp) = (rec.value(spatial), rec.value(temporal));
    let width = rec.value(grid.tokens).cols();
    if sp.rows() != d.spatial() || tp.rows() != d.time || sp.cols() != width || tp.cols() != width {
        return Err(shape_err(
            "add_positional",
            format!("tables {:?}/{:?} for grid {d:?} width {width}", sp.shape(), tp.shape()),
        ));
    }
    let s_idx: Vec<usize> = (0..d.tokens()).map(|i| i % d.spatial()).collect();
    let t_idx: Vec<usize> = (0..d.tokens()).map(|i| i / d.spatial()).collect();
    let s_tab = rec.gather_rows(spatial, s_idx)?;
    let t_tab = rec.gather_rows(temporal, t_idx)?;
    let x = rec.add(grid.tokens, s_tab)?;
    let tokens = rec.add(x, t_tab)?;
    Ok(TokenGrid { tokens, ..grid })
}

/// Attaches the classification token; it carries no positional embedding.
pub fn append_cls<F: Real>(rec: &ComputationRecord<F>, grid: TokenGrid, cls: Var) -> Result<TokenGrid> {
    if grid.cls.is_some() {
        return Err(Error::ClsAlreadyAppended);
    }
    let width = rec.value(grid.tokens).cols();
    if rec.value(cls).numel() != width {
        return Err(shape_err("append_cls", format!("cls {:?}", rec.value(cls).shape())));
    }
    Ok(TokenGrid { cls: Some(cls), ..grid })
}
