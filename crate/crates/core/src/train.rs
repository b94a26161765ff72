//! Training step: forward → objective → backward → Adam → memory write.
//!
//! Each sample of a batch gets its own tape; samples run in parallel and
//! their gradients are summed in batch order, so results do not depend on
//! the thread count.

use std::io::Write;

use crate::blocks::LEVELS;
use crate::config::TrainSettings;
use crate::data::{all_windows, ClipSample, Video};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{objective, LossBreakdown, LossWeights};
use crate::memory::Mode;
use crate::model::Model;
use crate::optim::Adam;
use crate::par;
use crate::params::{seeded_rng, ParamStore};
use crate::tensor::Tensor;

use rand::Rng;

/// RNG stream offset for batch sampling; stream `BATCH_STREAM + step`.
const BATCH_STREAM: u64 = 1 << 32;

/// Mutable training state; everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore<f32>,
    pub adam: Adam,
    /// Completed steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(store: ParamStore<f32>, s: &TrainSettings) -> Self {
        let adam = Adam::new(&store, s.lr, s.beta1, s.beta2, s.adam_eps);
        TrainState { store, adam, step: 0 }
    }
}

/// Gradient, losses and memory queries of one sample.
pub struct SampleResult {
    pub grads: Vec<Option<Tensor<f32>>>,
    pub loss: LossBreakdown,
    pub queries: Vec<Option<Tensor<f32>>>,
}

pub fn sample_gradient(model: &Model, store: &ParamStore<f32>, clip: &ClipSample, w: &LossWeights) -> Result<SampleResult> {
    let g = Graph::new(store);
    let frames = g.constant(clip.stacked_frames());
    let diffs = g.constant(clip.stacked_diffs());
    let target = g.constant(clip.target.clone());
    let out = model.forward(&g, &frames, &diffs)?;
    let (total, loss) = objective(&g, &out, &target, &model.level_banks(), w)?;
    let queries = out.levels.iter().map(|l| l.queries.as_ref().map(|q| q.to_tensor())).collect();
    if !loss.total.is_finite() {
        return Ok(SampleResult {
            grads: Vec::new(),
            loss,
            queries,
        });
    }
    let grads = g.backward(&total)?.into_param_grads(store.len());
    Ok(SampleResult { grads, loss, queries })
}

/// Window ids (into [`all_windows`]) drawn for `step`, with replacement.
pub fn sample_batch(seed: u64, step: usize, windows: usize, batch: usize) -> Vec<usize> {
    let mut rng = seeded_rng(seed, BATCH_STREAM + step as u64);
    (0..batch).map(|_| rng.random_range(0..windows)).collect()
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.prediction += p.prediction / n;
        m.total += p.total / n;
        for i in 0..LEVELS {
            m.compactness[i] += p.compactness[i] / n;
            m.sparsity[i] += p.sparsity[i] / n;
        }
    }
    m
}

/// Runs one optimization step on the batch for `state.step`.
pub fn train_step(model: &Model, state: &mut TrainState, videos: &[Video], s: &TrainSettings) -> Result<LossBreakdown> {
    let k = model.config.frames;
    let windows = all_windows(videos, k);
    if windows.is_empty() {
        return Err(Error::Data(format!("no training window: every video is shorter than {} frames", k + 1)));
    }
    let picks = sample_batch(s.seed, state.step, windows.len(), s.batch_size);
    let clips = picks
        .iter()
        .map(|&i| {
            let (v, w) = windows[i];
            ClipSample::from_video(&videos[v], v, w, k)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = LossWeights::from(s);
    let store = &state.store;
    let results = par::map_slice(&clips, |c| sample_gradient(model, store, c, &weights))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let bad: Vec<String> = results
        .iter()
        .zip(&clips)
        .filter(|(r, _)| !r.loss.total.is_finite() || r.grads.iter().flatten().any(|g| !g.is_finite()))
        .map(|(_, c)| format!("{}#{}", videos[c.video].name, c.target_index))
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite { step: state.step, batch: bad });
    }

    let inv = 1.0 / results.len() as f32;
    let n = state.store.len();
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; n];
    for r in &results {
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.add_assign(g),
                    None => *acc = Some(g.clone()),
                }
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    state.adam.step(&mut state.store, &grads)?;

    let pooled: Vec<Option<Tensor<f32>>> = (0..LEVELS)
        .map(|i| {
            let parts: Vec<&Tensor<f32>> = results.iter().filter_map(|r| r.queries[i].as_ref()).collect();
            (!parts.is_empty()).then(|| {
                let c = parts[0].last_dim();
                let data: Vec<f32> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::from_parts(vec![data.len() / c, c], data)
            })
        })
        .collect();
    model.write_memory(&mut state.store, &pooled, Mode::Train)?;
    state.step += 1;
    Ok(mean_breakdown(&results.iter().map(|r| r.loss).collect::<Vec<_>>()))
}

pub const LOSS_CSV_HEADER: &str = "step,L_p,L_c_total,L_s_total,total";

/// One loss-log row; `step` is 1-based (the step just completed).
pub fn loss_csv_row(step: usize, l: &LossBreakdown) -> String {
    format!(
        "{step},{:.8e},{:.8e},{:.8e},{:.8e}",
        l.prediction,
        l.compactness_total(),
        l.sparsity_total(),
        l.total
    )
}

/// Appends rows to an open loss log.
pub fn write_loss_row(w: &mut impl Write, step: usize, l: &LossBreakdown) -> Result<()> {
    writeln!(w, "{}", loss_csv_row(step, l))?;
    Ok(())
}
