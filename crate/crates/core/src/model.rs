//! Full predictor: two encoders, the interaction module and the decoder.
//!
//! Inputs are channel-stacked: frames as `H × W × 3k` (frame `j` in channels
//! `3j..3j+3`), differences as `H × W × 3(k-1)`.

use crate::blocks::{CaVssb, FinalProjection, MsVssb, PatchEmbed, PatchExpand, PatchMerge, BLOCKS_PER_STAGE, LEVELS};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{LevelOutput, Stim};
use crate::graph::{Graph, Var};
use crate::memory::{memory_write, MemoryBank, Mode};
use crate::params::{seeded_rng, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::Vssb;
use crate::tensor::{hwc, Tensor};

#[derive(Clone, Debug)]
pub enum EncoderBlock {
    Plain(Vssb),
    MultiScale(MsVssb),
    ChannelAware(CaVssb),
}

impl EncoderBlock {
    fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            EncoderBlock::Plain(b) => b.forward(g, x),
            EncoderBlock::MultiScale(b) => b.forward(g, x),
            EncoderBlock::ChannelAware(b) => b.forward(g, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Plain,
    MultiScale,
    ChannelAware,
}

/// Patch embedding, three patch merges and two blocks per level.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub in_channels: usize,
    pub embed: PatchEmbed,
    pub merges: Vec<PatchMerge>,
    pub stages: Vec<Vec<EncoderBlock>>,
}

impl Encoder {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, in_channels: usize, cfg: &ModelConfig, kind: EncoderKind) -> Self {
        let ssm = cfg.ssm();
        let embed = PatchEmbed::new(&mut b.sub("embed"), in_channels, cfg.base_width);
        let mut merges = Vec::new();
        let mut stages = Vec::new();
        for level in 1..=LEVELS {
            let dim = cfg.width(level);
            if level > 1 {
                merges.push(PatchMerge::new(&mut b.sub(&format!("merge{level}")), dim / 2));
            }
            let blocks = (0..BLOCKS_PER_STAGE)
                .map(|j| {
                    let mut bb = b.sub(&format!("stage{level}.block{j}"));
                    match kind {
                        EncoderKind::Plain => EncoderBlock::Plain(Vssb::new(&mut bb, dim, &ssm)),
                        EncoderKind::MultiScale => EncoderBlock::MultiScale(MsVssb::new(&mut bb, dim, &ssm)),
                        EncoderKind::ChannelAware => EncoderBlock::ChannelAware(CaVssb::new(&mut bb, dim, &ssm)),
                    }
                })
                .collect();
            stages.push(blocks);
        }
        Encoder {
            in_channels,
            embed,
            merges,
            stages,
        }
    }

    /// The four level outputs, finest first.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let (_, _, c) = hwc(x.shape(), "encoder")?;
        if c != self.in_channels {
            return Err(Error::dim("encoder", "channel", self.in_channels, c));
        }
        let mut h = self.embed.forward(g, x)?;
        let mut out = Vec::with_capacity(LEVELS);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = self.merges[i - 1].forward(g, &h)?;
            }
            for block in stage {
                h = block.forward(g, &h)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Widths `[8C, 4C, 2C, C]`, two VSSBs per stage, 2× expansion after the
/// first three stages with the next finer fused level added, then the head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<Vec<Vssb>>,
    pub expands: Vec<PatchExpand>,
    pub head: FinalProjection,
}

impl Decoder {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let ssm = cfg.ssm();
        let mut stages = Vec::new();
        let mut expands = Vec::new();
        for s in 0..LEVELS {
            let dim = cfg.width(LEVELS - s);
            stages.push(
                (0..BLOCKS_PER_STAGE)
                    .map(|j| Vssb::new(&mut b.sub(&format!("stage{}.block{j}", s + 1)), dim, &ssm))
                    .collect(),
            );
            if s + 1 < LEVELS {
                expands.push(PatchExpand::new(&mut b.sub(&format!("expand{}", s + 1)), dim, 2)?);
            }
        }
        let head = FinalProjection::new(&mut b.sub("head"), cfg.base_width, cfg.output_tanh)?;
        Ok(Decoder { stages, expands, head })
    }

    /// `fused` is finest first, as produced by the interaction module.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, fused: &[Var<T>]) -> Result<Var<T>> {
        if fused.len() != LEVELS {
            return Err(Error::shape("decoder", format!("expected {LEVELS} fused levels, got {}", fused.len())));
        }
        let mut x = fused[LEVELS - 1].clone();
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(g, &x)?;
            }
            if s + 1 < LEVELS {
                x = self.expands[s].forward(g, &x)?;
                x = g.add(&x, &fused[LEVELS - 2 - s])?;
            }
        }
        self.head.forward(g, &x)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub spatial: Encoder,
    pub temporal: Encoder,
    pub stim: Stim,
    pub decoder: Decoder,
}

/// Everything one forward pass exposes to losses and scoring.
pub struct ForwardOutput<T: Scalar> {
    pub prediction: Var<T>,
    pub spatial: Vec<Var<T>>,
    pub temporal: Vec<Var<T>>,
    pub levels: Vec<LevelOutput<T>>,
}

impl Model {
    /// Builds the model and its parameters from `config.seed`.
    pub fn build<T: Scalar>(config: &ModelConfig) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(config.seed, 0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let flags = &config.ablation;
        let spatial_kind = if flags.ms_off { EncoderKind::Plain } else { EncoderKind::MultiScale };
        let temporal_kind = if flags.ca_off { EncoderKind::Plain } else { EncoderKind::ChannelAware };
        let spatial = Encoder::new(&mut b.sub("spatial"), config.frame_channels(), config, spatial_kind);
        let temporal = Encoder::new(&mut b.sub("temporal"), config.diff_channels(), config, temporal_kind);
        let stim = Stim::new(&mut b, config)?;
        let decoder = Decoder::new(&mut b.sub("decoder"), config)?;
        let model = Model {
            config: config.clone(),
            spatial,
            temporal,
            stim,
            decoder,
        };
        Ok((model, store))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, frames: &Var<T>, diffs: &Var<T>) -> Result<ForwardOutput<T>> {
        let s = self.config.image_size;
        for (v, c, name) in [
            (frames, self.config.frame_channels(), "frames"),
            (diffs, self.config.diff_channels(), "differences"),
        ] {
            if v.shape() != [s, s, c] {
                return Err(Error::shape(
                    "model",
                    format!("{name} input {:?} does not match configured {s}×{s}×{c}", v.shape()),
                ));
            }
        }
        let spatial = self.spatial.forward(g, frames)?;
        let temporal = self.temporal.forward(g, diffs)?;
        let levels = self.stim.forward(g, &spatial, &temporal)?;
        let fused: Vec<Var<T>> = levels.iter().map(|l| l.output.clone()).collect();
        let prediction = self.decoder.forward(g, &fused)?;
        Ok(ForwardOutput {
            prediction,
            spatial,
            temporal,
            levels,
        })
    }

    /// Inference on plain tensors.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, frames: Tensor<T>, diffs: Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::inference(store);
        let out = self.forward(&g, &g.constant(frames), &g.constant(diffs))?;
        Ok(out.prediction.to_tensor())
    }

    pub fn banks(&self) -> impl Iterator<Item = &MemoryBank> {
        self.stim.banks()
    }

    /// Per level (finest first), the bank if that level has one.
    pub fn level_banks(&self) -> Vec<Option<&MemoryBank>> {
        self.stim.levels.iter().map(|l| l.bank.as_ref()).collect()
    }

    /// One write per bank with that level's queries (rows pooled over a batch).
    pub fn write_memory<T: Scalar>(&self, store: &mut ParamStore<T>, queries: &[Option<Tensor<T>>], mode: Mode) -> Result<()> {
        for (lvl, q) in self.stim.levels.iter().zip(queries) {
            if let (Some(bank), Some(q)) = (&lvl.bank, q) {
                memory_write(store, bank, q, mode)?;
            }
        }
        Ok(())
    }
}

/// Exact number of learnable scalars.
pub fn count_parameters<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count()
}
