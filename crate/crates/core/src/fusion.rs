//! Spatial-temporal interaction: per-level fusion of the two encoder streams
//! followed by a memory bank.

use crate::blocks::{Eca, LEVELS};
use crate::config::{AblationFlags, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::memory::{memory_augment, MemoryBank};
use crate::params::ParamBuilder;
use crate::scalar::Scalar;
use crate::ssm::{DwConv, LayerNorm, Linear, Ss2d, SsmConfig};
use crate::tensor::Tensor;

/// Fusion block mixing spatial and temporal maps of equal shape:
///
/// ```text
/// D_s = DWConv(Linear(LN(F_s)))        D_t likewise
/// H   = D_s ⊙ D_t + D_s + D_t
/// H_s = LN(SS2D(H)) ⊙ SiLU(Linear(LN(F_s)))   H_t likewise
/// out = ECA(Linear(H_s + H_t) + F_s + F_t)
/// ```
#[derive(Clone, Debug)]
pub struct Stfb {
    pub dim: usize,
    pub norm_s: LayerNorm,
    pub norm_t: LayerNorm,
    pub mix_s: Linear,
    pub mix_t: Linear,
    pub conv_s: DwConv,
    pub conv_t: DwConv,
    pub gate_s: Linear,
    pub gate_t: Linear,
    pub ss2d: Ss2d,
    pub scan_norm: LayerNorm,
    pub out_proj: Linear,
    pub eca: Eca,
}

/// Intermediates of one fusion pass.
pub struct StfbTrace<T: Scalar> {
    pub h_s: Var<T>,
    pub h_t: Var<T>,
    pub output: Var<T>,
}

impl Stfb {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, cfg: &SsmConfig) -> Self {
        Stfb {
            dim,
            norm_s: LayerNorm::new(b, "norm_s", dim),
            norm_t: LayerNorm::new(b, "norm_t", dim),
            mix_s: Linear::new(b, "mix_s", dim, dim, true),
            mix_t: Linear::new(b, "mix_t", dim, dim, true),
            conv_s: DwConv::new(b, "conv_s", dim, cfg.conv_kernel, true),
            conv_t: DwConv::new(b, "conv_t", dim, cfg.conv_kernel, true),
            gate_s: Linear::new(b, "gate_s", dim, dim, true),
            gate_t: Linear::new(b, "gate_t", dim, dim, true),
            ss2d: Ss2d::new(&mut b.sub("ss2d"), dim, cfg),
            scan_norm: LayerNorm::new(b, "scan_norm", dim),
            out_proj: Linear::new(b, "out_proj", dim, dim, true),
            eca: Eca::new(b, dim),
        }
    }

    pub fn trace<T: Scalar>(&self, g: &Graph<'_, T>, f_s: &Var<T>, f_t: &Var<T>) -> Result<StfbTrace<T>> {
        if f_s.shape() != f_t.shape() {
            return Err(Error::shape(
                "stfb",
                format!("spatial {:?} vs temporal {:?}", f_s.shape(), f_t.shape()),
            ));
        }
        let ln_s = self.norm_s.forward(g, f_s)?;
        let ln_t = self.norm_t.forward(g, f_t)?;
        let d_s = self.conv_s.forward(g, &self.mix_s.forward(g, &ln_s)?)?;
        let d_t = self.conv_t.forward(g, &self.mix_t.forward(g, &ln_t)?)?;
        let mixed = g.add(&g.add(&g.mul(&d_s, &d_t)?, &d_s)?, &d_t)?;
        let scanned = self.scan_norm.forward(g, &self.ss2d.forward(g, &mixed)?)?;
        let h_s = g.mul(&scanned, &g.silu(&self.gate_s.forward(g, &ln_s)?))?;
        let h_t = g.mul(&scanned, &g.silu(&self.gate_t.forward(g, &ln_t)?))?;
        let pre = self.out_proj.forward(g, &g.add(&h_s, &h_t)?)?;
        let pre = g.add(&g.add(&pre, f_s)?, f_t)?;
        Ok(StfbTrace {
            h_s,
            h_t,
            output: self.eca.forward(g, &pre)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, f_s: &Var<T>, f_t: &Var<T>) -> Result<Var<T>> {
        Ok(self.trace(g, f_s, f_t)?.output)
    }
}

/// How one level combines the two streams.
#[derive(Clone, Debug)]
pub enum Fuser {
    Stfb(Box<Stfb>),
    /// `Linear([F_s, F_t])`.
    Concat(Linear),
    /// `F_s + F_t`, used below the bottleneck when only the last level fuses.
    Sum,
}

impl Fuser {
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, f_s: &Var<T>, f_t: &Var<T>) -> Result<Var<T>> {
        match self {
            Fuser::Stfb(b) => b.forward(g, f_s, f_t),
            Fuser::Concat(lin) => lin.forward(g, &g.concat_channels(f_s, f_t)?),
            Fuser::Sum => {
                if f_s.shape() != f_t.shape() {
                    return Err(Error::shape("fuse", "stream shapes differ"));
                }
                g.add(f_s, f_t)
            }
        }
    }
}

/// One level of the interaction module.
#[derive(Clone, Debug)]
pub struct FusionLevel {
    pub level: usize,
    pub dim: usize,
    pub fuser: Fuser,
    pub bank: Option<MemoryBank>,
}

/// Output of one level.
pub struct LevelOutput<T: Scalar> {
    /// `F_st` before memory.
    pub fused: Var<T>,
    /// `F̃_st`; equals `fused` when the level has no bank.
    pub output: Var<T>,
    /// `N̂ × C` queries and `N̂ × N` read weights when a bank is present.
    pub queries: Option<Var<T>>,
    pub weights: Option<Tensor<T>>,
}

/// Four fusion levels with their memory banks.
#[derive(Clone, Debug)]
pub struct Stim {
    pub levels: Vec<FusionLevel>,
}

impl Stim {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let ssm = cfg.ssm();
        let flags: &AblationFlags = &cfg.ablation;
        let mut levels = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let level = i + 1;
            let dim = cfg.base_width << i;
            let mut lb = b.sub(&format!("stim{level}"));
            let active = !flags.multi_level_off || level == LEVELS;
            let fuser = if !active {
                Fuser::Sum
            } else if flags.stfb_off {
                Fuser::Concat(Linear::new(&mut lb, "concat_fuse", 2 * dim, dim, true))
            } else {
                Fuser::Stfb(Box::new(Stfb::new(&mut lb.sub("stfb"), dim, &ssm)))
            };
            let bank = if active && !flags.memory_off[i] {
                Some(MemoryBank::new(
                    &mut lb.sub("memory"),
                    level,
                    cfg.memory_sizes[i],
                    dim,
                    cfg.k_percent,
                )?)
            } else {
                None
            };
            levels.push(FusionLevel { level, dim, fuser, bank });
        }
        Ok(Stim { levels })
    }

    /// Fuse and memory-augment every level. Pure: memory writes happen in the training loop.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, spatial: &[Var<T>], temporal: &[Var<T>]) -> Result<Vec<LevelOutput<T>>> {
        if spatial.len() != LEVELS || temporal.len() != LEVELS {
            return Err(Error::shape(
                "stim",
                format!("expected {LEVELS} levels per stream, got {} and {}", spatial.len(), temporal.len()),
            ));
        }
        let mut out = Vec::with_capacity(LEVELS);
        for ((lvl, f_s), f_t) in self.levels.iter().zip(spatial).zip(temporal) {
            let fused = lvl.fuser.forward(g, f_s, f_t)?;
            out.push(match &lvl.bank {
                Some(bank) => {
                    let aug = memory_augment(g, &fused, bank)?;
                    LevelOutput {
                        fused,
                        output: aug.output,
                        queries: Some(aug.queries),
                        weights: Some(aug.weights),
                    }
                }
                None => LevelOutput {
                    output: fused.clone(),
                    fused,
                    queries: None,
                    weights: None,
                },
            });
        }
        Ok(out)
    }

    pub fn banks(&self) -> impl Iterator<Item = &MemoryBank> {
        self.levels.iter().filter_map(|l| l.bank.as_ref())
    }
}
