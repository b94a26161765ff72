//! End-to-end flows shared by the command-line driver and the acceptance
//! suite: measuring test videos, scoring, sweeps and resumable training.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/manifest.json
//! <out>/loss.csv                     one row per completed step
//! <out>/checkpoints/step_000500.ckpt parameters only
//! <out>/last.ckpt                    parameters + optimizer state (resume point)
//! <out>/final.ckpt                   parameters + optimizer state after the last step
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Normalization, RunConfig};
use crate::data::{all_windows, ClipSample, Video};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::LossBreakdown;
use crate::model::Model;
use crate::par;
use crate::params::ParamStore;
use crate::score::{frame_level_auc, memory_distance, psnr, score_videos, RawScores};
use crate::tensor::Tensor;
use crate::train::{train_step, write_loss_row, TrainState, LOSS_CSV_HEADER};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Measurements of one window.
#[derive(Clone, Debug)]
pub struct Measurement {
    pub psnr: f64,
    /// One entry per level with a bank, finest first.
    pub distances: Vec<f64>,
    pub prediction: Option<Tensor<f32>>,
    pub target: Option<Tensor<f32>>,
}

/// Inference on one window; the store is only read.
pub fn measure_window(model: &Model, store: &ParamStore<f32>, clip: &ClipSample, keep: bool) -> Result<Measurement> {
    let g = Graph::inference(store);
    let frames = g.constant(clip.stacked_frames());
    let diffs = g.constant(clip.stacked_diffs());
    let out = model.forward(&g, &frames, &diffs)?;
    let pred = out.prediction.to_tensor();
    let mut distances = Vec::new();
    for (lvl, bank) in out.levels.iter().zip(model.level_banks()) {
        if let (Some(q), Some(bank)) = (&lvl.queries, bank) {
            distances.push(memory_distance(&q.to_tensor(), store.get(bank.items))?);
        }
    }
    Ok(Measurement {
        psnr: psnr(&pred, &clip.target)?,
        distances,
        prediction: keep.then(|| pred),
        target: keep.then(|| clip.target.clone()),
    })
}

/// Raw per-frame measurements of every video, plus per-window predictions
/// when `keep` is set. Windows run in parallel; output order is fixed.
pub fn measure_videos(
    model: &Model,
    store: &ParamStore<f32>,
    videos: &[Video],
    keep: bool,
) -> Result<(Vec<RawScores>, Vec<Vec<Measurement>>)> {
    let k = model.config.frames;
    for v in videos {
        if v.frames.len() <= k {
            return Err(Error::Data(format!(
                "video '{}' has {} frames; at least {} are needed",
                v.name,
                v.frames.len(),
                k + 1
            )));
        }
    }
    let windows = all_windows(videos, k);
    let measured = par::map_slice(&windows, |&(v, w)| {
        ClipSample::from_video(&videos[v], v, w, k).and_then(|c| measure_window(model, store, &c, keep))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let levels: Vec<usize> = model
        .level_banks()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_some())
        .map(|(i, _)| i + 1)
        .collect();
    let mut raws = Vec::with_capacity(videos.len());
    let mut per_video = Vec::with_capacity(videos.len());
    let mut it = measured.into_iter();
    for v in videos {
        let n = v.frames.len() - k;
        let ms: Vec<Measurement> = it.by_ref().take(n).collect();
        let frames: Vec<usize> = (k..v.frames.len()).collect();
        raws.push(RawScores {
            psnr: ms.iter().map(|m| m.psnr).collect(),
            distances: (0..levels.len()).map(|l| ms.iter().map(|m| m.distances[l]).collect()).collect(),
            levels: levels.clone(),
            labels: v.labels.as_ref().map(|l| frames.iter().map(|&f| l[f]).collect()),
            frames,
        });
        per_video.push(ms);
    }
    Ok((raws, per_video))
}

/// Fused scores of every video and the frame-level AUC over all of them.
pub fn score_and_auc(raw: &[RawScores], tau: f64, scope: Normalization) -> Result<(Vec<Vec<f64>>, f64)> {
    let scores = score_videos(raw, tau, scope)?;
    let mut labels = Vec::new();
    for r in raw {
        labels.extend_from_slice(
            r.labels
                .as_ref()
                .ok_or_else(|| Error::Data("AUC needs labels for every test video".into()))?,
        );
    }
    let flat: Vec<f64> = scores.iter().flatten().copied().collect();
    let auc = frame_level_auc(&flat, &labels)?;
    Ok((scores, auc))
}

/// Copy of `model` whose banks keep `k_percent` of their items on read.
pub fn with_k_percent(model: &Model, k_percent: f64) -> Result<Model> {
    let mut cfg = model.config.clone();
    cfg.k_percent = k_percent;
    cfg.validate()?;
    let mut m = model.clone();
    m.config = cfg;
    for lvl in &mut m.stim.levels {
        if let Some(b) = &mut lvl.bank {
            b.k_percent = k_percent;
        }
    }
    Ok(m)
}

/// Parses `start:end:step` into the inclusive grid `start + i·step`.
pub fn parse_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("range '{spec}' must be start:end:step")))?;
    let [a, b, s] = parts[..] else {
        return Err(Error::Config(format!("range '{spec}' must be start:end:step")));
    };
    if !(s > 0.0) || b < a || !a.is_finite() || !b.is_finite() {
        return Err(Error::Config(format!("range '{spec}' needs start ≤ end and a positive step")));
    }
    let n = ((b - a) / s + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| a + i as f64 * s).collect())
}

/// AUC at each τ on fixed measurements.
pub fn tau_sweep(raw: &[RawScores], taus: &[f64], scope: Normalization) -> Result<Vec<(f64, f64)>> {
    taus.iter().map(|&t| Ok((t, score_and_auc(raw, t, scope)?.1))).collect()
}

/// AUC at each top-k percentage; every point re-runs inference.
pub fn k_sweep(
    model: &Model,
    store: &ParamStore<f32>,
    videos: &[Video],
    ks: &[f64],
    tau: f64,
    scope: Normalization,
) -> Result<Vec<(f64, f64)>> {
    ks.iter()
        .map(|&k| {
            let m = with_k_percent(model, k)?;
            let (raw, _) = measure_videos(&m, store, videos, false)?;
            Ok((k, score_and_auc(&raw, tau, scope)?.1))
        })
        .collect()
}

/// Record of how a run directory was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub code_version: String,
    pub command_line: Vec<String>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub ablations: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = Self::path(dir);
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::file(&p, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = Self::path(dir);
        let text = fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(&p, e))
    }
}

/// Keeps the header and rows for steps `1..=step`; later rows belong to an
/// interrupted tail and are dropped.
fn truncate_loss_log(path: &Path, step: usize) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut kept = vec![LOSS_CSV_HEADER.to_string()];
    for line in BufReader::new(f).lines().skip(1) {
        let line = line?;
        let s: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::file(path, format!("malformed loss row '{line}'")))?;
        if s <= step {
            kept.push(line);
        }
    }
    if kept.len() != step + 1 {
        return Err(Error::file(
            path,
            format!("holds {} rows but the checkpoint is at step {step}", kept.len() - 1),
        ));
    }
    fs::write(path, kept.join("\n") + "\n").map_err(|e| Error::file(path, e))
}

/// Trains until `cfg.train.steps`, writing the loss log and checkpoints into
/// `dir`. With `resume`, continues from `dir/last.ckpt` when present.
/// `on_step` sees each completed step number and its losses.
pub fn run_training(
    dir: &Path,
    cfg: &RunConfig,
    videos: &[Video],
    resume: bool,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<(Model, TrainState)> {
    cfg.validate()?;
    let k = cfg.model.frames;
    if all_windows(videos, k).is_empty() {
        return Err(Error::Data(format!(
            "no training window: every video has fewer than {} frames",
            k + 1
        )));
    }
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::file(&ckpt_dir, e))?;
    let last = dir.join(LAST_CHECKPOINT);
    let log_path = dir.join(LOSS_FILE);

    let (model, mut state) = if resume && last.exists() {
        let ck = checkpoint::load(&last)?;
        if ck.config != cfg.model {
            return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
        }
        let (model, store) = checkpoint::restore(&ck)?;
        let adam = ck
            .adam
            .ok_or_else(|| Error::file(&last, "resume point carries no optimizer state"))?;
        truncate_loss_log(&log_path, ck.step)?;
        let state = TrainState {
            store,
            adam,
            step: ck.step,
        };
        (model, state)
    } else {
        let (model, store) = Model::build::<f32>(&cfg.model)?;
        fs::write(&log_path, format!("{LOSS_CSV_HEADER}\n")).map_err(|e| Error::file(&log_path, e))?;
        (model, TrainState::new(store, &cfg.train))
    };

    let mut log = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::file(&log_path, e))?;
    while state.step < cfg.train.steps {
        let losses = train_step(&model, &mut state, videos, &cfg.train)?;
        write_loss_row(&mut log, state.step, &losses)?;
        on_step(state.step, &losses);
        if cfg.train.checkpoint_every > 0 && state.step % cfg.train.checkpoint_every == 0 {
            log.flush()?;
            let p = ckpt_dir.join(format!("step_{:06}.ckpt", state.step));
            checkpoint::save(&p, &cfg.model, &state.store, state.step, None)?;
            checkpoint::save(&last, &cfg.model, &state.store, state.step, Some(&state.adam))?;
        }
    }
    log.flush()?;
    checkpoint::save(&dir.join(FINAL_CHECKPOINT), &cfg.model, &state.store, state.step, Some(&state.adam))?;
    checkpoint::save(&last, &cfg.model, &state.store, state.step, Some(&state.adam))?;
    Ok((model, state))
}
