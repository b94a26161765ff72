//! Composite building blocks: patch embedding/merging/expanding, the
//! multi-scale and channel-aware vision blocks, ECA and the output head.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::ssm::{DwConv, LayerNorm, Linear, SsmConfig, Vssb};
use crate::tensor::hwc;

pub const LEVELS: usize = 4;
pub const BLOCKS_PER_STAGE: usize = 2;
pub const PATCH: usize = 4;

/// Width and stride of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// 1-based level index.
    pub level: usize,
    pub width: usize,
    pub stride: usize,
    pub blocks: usize,
}

impl StageSpec {
    /// Encoder levels 1..4 for base width `c`: widths `[c, 2c, 4c, 8c]`, strides `[4, 8, 16, 32]`.
    pub fn pyramid(c: usize) -> [StageSpec; LEVELS] {
        std::array::from_fn(|i| StageSpec {
            level: i + 1,
            width: c << i,
            stride: PATCH << i,
            blocks: BLOCKS_PER_STAGE,
        })
    }

    /// Map shape of this level for an `image × image` input.
    pub fn shape(&self, image: usize) -> [usize; 3] {
        [image / self.stride, image / self.stride, self.width]
    }
}

/// Row indices turning `H × W × C` into `H/f × W/f × (f·f·C)`,
/// channel groups ordered `(dy, dx)`.
fn space_to_depth_index(h: usize, w: usize, f: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for by in 0..h / f {
        for bx in 0..w / f {
            for dy in 0..f {
                for dx in 0..f {
                    idx.push((by * f + dy) * w + bx * f + dx);
                }
            }
        }
    }
    idx
}

/// Inverse of [`space_to_depth_index`] for an `h × w` coarse grid.
fn depth_to_space_index(h: usize, w: usize, f: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * f * f);
    for y in 0..h * f {
        for x in 0..w * f {
            let (by, dy, bx, dx) = (y / f, y % f, x / f, x % f);
            idx.push((by * w + bx) * f * f + dy * f + dx);
        }
    }
    idx
}

pub fn space_to_depth<T: Scalar>(g: &Graph<'_, T>, x: &Var<T>, f: usize) -> Result<Var<T>> {
    let (h, w, c) = hwc(x.shape(), "space_to_depth")?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::shape(
            "space_to_depth",
            format!("{h}×{w} is not divisible by {f}"),
        ));
    }
    g.gather_rows(x, Arc::new(space_to_depth_index(h, w, f)), &[h / f, w / f, f * f * c])
}

pub fn depth_to_space<T: Scalar>(g: &Graph<'_, T>, x: &Var<T>, f: usize) -> Result<Var<T>> {
    let (h, w, c) = hwc(x.shape(), "depth_to_space")?;
    if c % (f * f) != 0 {
        return Err(Error::shape(
            "depth_to_space",
            format!("{c} channels not divisible by {}", f * f),
        ));
    }
    let co = c / (f * f);
    let flat = g.reshape(x, &[h * w * f * f, co])?;
    g.gather_rows(&flat, Arc::new(depth_to_space_index(h, w, f)), &[h * f, w * f, co])
}

/// Non-overlapping `4 × 4` patches linearly mapped to `C` channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub in_ch: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, in_ch: usize, dim: usize) -> Self {
        PatchEmbed {
            in_ch,
            proj: Linear::new(b, "proj", PATCH * PATCH * in_ch, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (h, w, c) = hwc(x.shape(), "patch_embed")?;
        if c != self.in_ch {
            return Err(Error::dim("patch_embed", "channel", self.in_ch, c));
        }
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("input {h}×{w} is not divisible by {PATCH}; resize frames to a multiple of {PATCH}"),
            ));
        }
        let patches = space_to_depth(g, x, PATCH)?;
        self.proj.forward(g, &patches)
    }
}

/// 2×2 neighbourhoods concatenated, normalized and reduced to `2C`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub dim: usize,
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize) -> Self {
        PatchMerge {
            dim,
            norm: LayerNorm::new(b, "norm", 4 * dim),
            reduction: Linear::new(b, "reduction", 4 * dim, 2 * dim, false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (h, w, c) = hwc(x.shape(), "patch_merge")?;
        if c != self.dim {
            return Err(Error::dim("patch_merge", "channel", self.dim, c));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("patch_merge", format!("odd spatial size {h}×{w}")));
        }
        let cat = space_to_depth(g, x, 2)?;
        self.reduction.forward(g, &self.norm.forward(g, &cat)?)
    }
}

/// Linear channel expansion then channel-to-space rearrangement:
/// `H × W × C → fH × fW × C/f`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub dim: usize,
    pub factor: usize,
    pub expand: Linear,
}

impl PatchExpand {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, factor: usize) -> Result<Self> {
        if factor == 0 || dim % factor != 0 {
            return Err(Error::Config(format!(
                "patch_expand: {dim} channels not divisible by factor {factor}"
            )));
        }
        Ok(PatchExpand {
            dim,
            factor,
            expand: Linear::new(b, "expand", dim, factor * dim, false),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.dim / self.factor
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, _, c) = hwc(x.shape(), "patch_expand")?;
        if c != self.dim {
            return Err(Error::dim("patch_expand", "channel", self.dim, c));
        }
        let e = self.expand.forward(g, x)?;
        depth_to_space(g, &e, self.factor)
    }
}

/// Vision block preceded by parallel 1/3/5 depth-wise filters:
/// `VSSB(x + Linear(Σ_k DWConv_k(GELU(Linear(x)))))`.
#[derive(Clone, Debug)]
pub struct MsVssb {
    pub dim: usize,
    pub proj_in: Linear,
    pub convs: Vec<DwConv>,
    pub proj_out: Linear,
    pub vssb: Vssb,
}

pub const MULTI_SCALE_KERNELS: [usize; 3] = [1, 3, 5];

impl MsVssb {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, cfg: &SsmConfig) -> Self {
        let hidden = cfg.expand * dim;
        let convs = MULTI_SCALE_KERNELS
            .iter()
            .map(|&k| DwConv::new(b, &format!("dw{k}"), hidden, k, false))
            .collect();
        MsVssb {
            dim,
            proj_in: Linear::new(b, "ms_in", dim, hidden, true),
            convs,
            proj_out: Linear::new(b, "ms_out", hidden, dim, true),
            vssb: Vssb::new(&mut b.sub("vssb"), dim, cfg),
        }
    }

    /// The multi-scale term `X'`.
    pub fn multi_scale<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = g.gelu(&self.proj_in.forward(g, x)?);
        let mut acc: Option<Var<T>> = None;
        for conv in &self.convs {
            let y = conv.forward(g, &h)?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(&a, &y)?,
            });
        }
        self.proj_out.forward(g, &acc.expect("at least one kernel"))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, _, c) = hwc(x.shape(), "ms_vssb")?;
        if c != self.dim {
            return Err(Error::dim("ms_vssb", "channel", self.dim, c));
        }
        let xp = self.multi_scale(g, x)?;
        self.vssb.forward(g, &g.add(x, &xp)?)
    }
}

/// Vision block followed by a pooled channel gate:
/// `X1 = VSSB(x)`, `X' = LN(Linear(X1))`, `out = X1 + X' ⊙ σ(avg(X') + max(X'))`.
#[derive(Clone, Debug)]
pub struct CaVssb {
    pub dim: usize,
    pub vssb: Vssb,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl CaVssb {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, cfg: &SsmConfig) -> Self {
        CaVssb {
            dim,
            vssb: Vssb::new(&mut b.sub("vssb"), dim, cfg),
            proj: Linear::new(b, "ca_proj", dim, dim, true),
            norm: LayerNorm::new(b, "ca_norm", dim),
        }
    }

    /// Per-channel gate in `(0, 1)` computed from `X'`.
    pub fn gate<T: Scalar>(g: &Graph<'_, T>, xp: &Var<T>) -> Result<Var<T>> {
        let pooled = g.add(&g.spatial_mean(xp), &g.spatial_max(xp))?;
        Ok(g.sigmoid(&pooled))
    }

    /// The attention term `X2`.
    pub fn attention<T: Scalar>(&self, g: &Graph<'_, T>, x1: &Var<T>) -> Result<Var<T>> {
        let xp = self.norm.forward(g, &self.proj.forward(g, x1)?)?;
        let gate = Self::gate(g, &xp)?;
        g.mul_channel(&xp, &gate)
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, _, c) = hwc(x.shape(), "ca_vssb")?;
        if c != self.dim {
            return Err(Error::dim("ca_vssb", "channel", self.dim, c));
        }
        let x1 = self.vssb.forward(g, x)?;
        let x2 = self.attention(g, &x1)?;
        g.add(&x1, &x2)
    }
}

/// Adaptive ECA kernel: `t = ⌊(log2 C + 1) / 2⌋`, bumped to odd, at least 3.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = (((channels.max(1) as f64).log2() + 1.0) / 2.0).abs() as usize;
    let k = if t % 2 == 1 { t } else { t + 1 };
    k.max(3)
}

/// Efficient channel attention: global mean → 1-D conv across channels → sigmoid → rescale.
#[derive(Clone, Debug)]
pub struct Eca {
    pub kernel: usize,
    pub weight: ParamId,
}

impl Eca {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Self {
        let kernel = eca_kernel_size(channels);
        let bound = 1.0 / (kernel as f64).sqrt();
        Eca {
            kernel,
            weight: b.sub("eca").uniform("weight", &[kernel], -bound, bound),
        }
    }

    pub fn gates<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = g.spatial_mean(x);
        let mixed = g.conv1d_same(&pooled, &g.param(self.weight))?;
        Ok(g.sigmoid(&mixed))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        hwc(x.shape(), "eca")?;
        let gate = self.gates(g, x)?;
        g.mul_channel(x, &gate)
    }
}

/// 4× patch expansion followed by a linear map to RGB.
#[derive(Clone, Debug)]
pub struct FinalProjection {
    pub expand: PatchExpand,
    pub head: Linear,
    pub tanh: bool,
}

impl FinalProjection {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, tanh: bool) -> Result<Self> {
        let expand = PatchExpand::new(&mut b.sub("up"), dim, PATCH)?;
        let head = Linear::new(b, "head", expand.out_dim(), 3, true);
        Ok(FinalProjection { expand, head, tanh })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let up = self.expand.forward(g, x)?;
        let y = self.head.forward(g, &up)?;
        Ok(if self.tanh { g.tanh(&y) } else { y })
    }
}
