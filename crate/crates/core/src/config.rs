//! Model, training and scoring configuration.

use serde::{Deserialize, Serialize};

use crate::blocks::LEVELS;
use crate::error::{Error, Result};
use crate::ssm::SsmConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Stride of the deepest encoder level; image sides must be multiples of it.
pub const MAX_STRIDE: usize = 32;

/// Structural switches for ablation variants. All `false` is the full model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Plain VSSB instead of the multi-scale block in the spatial encoder.
    pub ms_off: bool,
    /// Plain VSSB instead of the channel-aware block in the temporal encoder.
    pub ca_off: bool,
    /// Concatenate-and-project instead of the fusion block.
    pub stfb_off: bool,
    /// Per level (1..4), no memory bank.
    pub memory_off: [bool; LEVELS],
    /// Fuse and read memory at level 4 only; levels 1..3 pass `F_s + F_t`.
    pub multi_level_off: bool,
}

/// Flag names accepted by [`AblationFlags::apply`].
pub const ABLATION_NAMES: &[&str] = &[
    "ms_off",
    "ca_off",
    "stfb_off",
    "memory_off",
    "memory_off_l1",
    "memory_off_l2",
    "memory_off_l3",
    "memory_off_l4",
    "multi_level_off",
    "bottleneck_only",
    "baseline",
];

impl AblationFlags {
    /// Switch on one named variant. `baseline` engages every structural flag.
    pub fn apply(&mut self, name: &str) -> Result<()> {
        match name {
            "ms_off" => self.ms_off = true,
            "ca_off" => self.ca_off = true,
            "stfb_off" => self.stfb_off = true,
            "memory_off" => self.memory_off = [true; LEVELS],
            "multi_level_off" | "bottleneck_only" => self.multi_level_off = true,
            "baseline" => {
                *self = AblationFlags {
                    ms_off: true,
                    ca_off: true,
                    stfb_off: true,
                    memory_off: [true; LEVELS],
                    multi_level_off: true,
                }
            }
            other => match other.strip_prefix("memory_off_l").and_then(|l| l.parse::<usize>().ok()) {
                Some(l @ 1..=LEVELS) => self.memory_off[l - 1] = true,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown ablation '{other}' (expected one of {})",
                        ABLATION_NAMES.join(", ")
                    )))
                }
            },
        }
        Ok(())
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut f = AblationFlags::default();
        for n in names {
            f.apply(n.as_ref())?;
        }
        Ok(f)
    }

    /// Level `i` (0-based) reads memory.
    pub fn has_memory(&self, i: usize) -> bool {
        !self.memory_off[i] && (!self.multi_level_off || i + 1 == LEVELS)
    }

    pub fn any_memory(&self) -> bool {
        (0..LEVELS).any(|i| self.has_memory(i))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    /// Level-1 width `C`; levels use `[C, 2C, 4C, 8C]`.
    pub base_width: usize,
    /// Input frames per clip; the model sees `frames` frames and `frames - 1` differences.
    pub frames: usize,
    pub image_size: usize,
    pub memory_sizes: [usize; LEVELS],
    pub k_percent: f64,
    pub expand: usize,
    pub d_state: usize,
    pub output_tanh: bool,
    pub ablation: AblationFlags,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

impl ModelConfig {
    /// 256×256 input, `C = 32`.
    pub fn full() -> Self {
        ModelConfig {
            version: CONFIG_VERSION,
            base_width: 32,
            frames: 4,
            image_size: 256,
            memory_sizes: [80, 60, 40, 20],
            k_percent: 60.0,
            expand: 2,
            d_state: 16,
            output_tanh: false,
            ablation: AblationFlags::default(),
            seed: 0,
        }
    }

    /// 64×64 input, `C = 16`.
    pub fn desk() -> Self {
        ModelConfig {
            base_width: 16,
            image_size: 64,
            ..ModelConfig::full()
        }
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            d_state: self.d_state,
            expand: self.expand,
            ..SsmConfig::default()
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.image_size == 0 || self.image_size % MAX_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {MAX_STRIDE}",
                self.image_size
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 input frames, got {}", self.frames)));
        }
        if self.base_width == 0 || self.expand == 0 || self.d_state == 0 {
            return Err(Error::Config("base width, expansion and state size must be positive".into()));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::Config(format!("k_percent must lie in (0, 100], got {}", self.k_percent)));
        }
        if let Some(n) = self.memory_sizes.iter().find(|&&n| n < 2) {
            return Err(Error::Config(format!("memory banks need at least 2 items, got {n}")));
        }
        Ok(())
    }

    /// Channels of the stacked frame input.
    pub fn frame_channels(&self) -> usize {
        3 * self.frames
    }

    /// Channels of the stacked difference input.
    pub fn diff_channels(&self) -> usize {
        3 * (self.frames - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_compact: f64,
    pub lambda_sparse: f64,
    pub use_compactness: bool,
    pub use_sparsity: bool,
    /// How the prediction term reduces over pixels and channels.
    pub prediction_reduction: Reduction,
    /// How the compactness term reduces over queries.
    pub compactness_reduction: Reduction,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 3000,
            batch_size: 8,
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_compact: 0.1,
            lambda_sparse: 0.01,
            use_compactness: true,
            use_sparsity: true,
            prediction_reduction: Reduction::Sum,
            compactness_reduction: Reduction::Sum,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Reduction of a per-query loss over the queries of one map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

pub const DESK_STEPS: usize = 375;
pub const DESK_BATCH: usize = 4;

/// How the min-max map `g` is scoped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    PerVideo,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSettings {
    /// Weight of the prediction channel; `1 - tau` goes to memory distances.
    pub tau: f64,
    pub normalization: Normalization,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        ScoreSettings {
            tau: 0.8,
            normalization: Normalization::PerVideo,
        }
    }
}

/// Everything a config file may set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub score: ScoreSettings,
}

impl RunConfig {
    /// Desk model with the short schedule: 375 steps of batch 4.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainSettings {
                steps: DESK_STEPS,
                batch_size: DESK_BATCH,
                ..TrainSettings::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.score.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.score.tau)));
        }
        Ok(())
    }
}
