//! Frame scoring and frame-level AUC.
//!
//! `S = τ(1 − g(S_p)) + (1 − τ) g(Σ_i g(S_d^i))`, `N_s = 1 − S`, with `g` the
//! min-max map over one video (or over the whole test set when normalization
//! is global). Without memory distances `S = 1 − g(S_p)`.

use std::cmp::Ordering;

use crate::config::Normalization;
use crate::error::{Error, Result};
use crate::memory::nearest_item;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard of the PSNR denominator and the min-max range.
pub const SCORE_EPS: f64 = 1e-8;

/// `10·log10(max(P) / MSE)` with `P`, `I` mapped from `[−1, 1]` to `[0, 1]`.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let mut peak = f64::NEG_INFINITY;
    let mut se = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (0.5 * (p.f64() + 1.0), 0.5 * (t.f64() + 1.0));
        peak = peak.max(p);
        se += (p - t) * (p - t);
    }
    let mse = (se / pred.len() as f64).max(SCORE_EPS);
    Ok(10.0 * (peak.max(SCORE_EPS) / mse).log10())
}

/// Mean squared distance of each query to its nearest item.
pub fn memory_distance<T: Scalar>(queries: &Tensor<T>, items: &Tensor<T>) -> Result<f64> {
    let near = nearest_item(queries, items)?;
    Ok(near.iter().map(|&(_, d)| d.f64()).sum::<f64>() / near.len().max(1) as f64)
}

/// `(v − min) / (max − min + ε)`.
pub fn minmax_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|&x| (x - lo) / (hi - lo + SCORE_EPS)).collect()
}

/// Raw per-frame measurements of one video.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawScores {
    pub frames: Vec<usize>,
    pub psnr: Vec<f64>,
    /// One sequence per level that has a memory bank.
    pub distances: Vec<Vec<f64>>,
    /// Level (1-based) of each distance sequence.
    pub levels: Vec<usize>,
    pub labels: Option<Vec<u8>>,
}

/// Fused anomaly score from already-normalized channels.
pub fn fuse(g_psnr: f64, g_dist: Option<f64>, tau: f64) -> f64 {
    match g_dist {
        Some(gd) => tau * (1.0 - g_psnr) + (1.0 - tau) * gd,
        None => 1.0 - g_psnr,
    }
}

/// Anomaly score `S` per frame for one video.
pub fn anomaly_scores(psnr: &[f64], distances: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if psnr.is_empty() {
        return Err(Error::Data("cannot score an empty video".into()));
    }
    if distances.iter().any(|d| d.len() != psnr.len()) {
        return Err(Error::shape("anomaly_scores", "distance and PSNR sequences differ in length"));
    }
    let gp = minmax_normalize(psnr);
    let gd = combined_distance(distances);
    Ok((0..psnr.len()).map(|i| fuse(gp[i], gd.as_ref().map(|g| g[i]), tau)).collect())
}

/// `g(Σ_i g(S_d^i))`, or `None` without memory.
fn combined_distance(distances: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = distances.first()?;
    let mut sum = vec![0.0; first.len()];
    for d in distances {
        for (s, v) in sum.iter_mut().zip(minmax_normalize(d)) {
            *s += v;
        }
    }
    Some(minmax_normalize(&sum))
}

/// Scores of every video under a normalization scope.
pub fn score_videos(videos: &[RawScores], tau: f64, scope: Normalization) -> Result<Vec<Vec<f64>>> {
    match scope {
        Normalization::PerVideo => videos.iter().map(|v| anomaly_scores(&v.psnr, &v.distances, tau)).collect(),
        Normalization::Global => {
            let lens: Vec<usize> = videos.iter().map(|v| v.psnr.len()).collect();
            let psnr: Vec<f64> = videos.iter().flat_map(|v| v.psnr.iter().copied()).collect();
            let levels = videos.first().map_or(0, |v| v.distances.len());
            if videos.iter().any(|v| v.distances.len() != levels) {
                return Err(Error::shape("score_videos", "videos differ in memory levels"));
            }
            let dist: Vec<Vec<f64>> = (0..levels)
                .map(|l| videos.iter().flat_map(|v| v.distances[l].iter().copied()).collect())
                .collect();
            let all = anomaly_scores(&psnr, &dist, tau)?;
            let mut out = Vec::new();
            let mut at = 0;
            for n in lens {
                out.push(all[at..at + n].to_vec());
                at += n;
            }
            Ok(out)
        }
    }
}

/// ROC AUC of `scores` (higher = more anomalous) against labels (1 = anomalous),
/// as the Mann–Whitney statistic with mid-ranks for ties.
pub fn frame_level_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("labels must be 0 or 1, found {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!(
            "labels contain only {} frames; both normal and anomalous frames are required",
            if pos == 0 { "normal" } else { "anomalous" }
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN anomaly score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| labels[order[k]] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One row of a per-video score CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub frame: usize,
    pub psnr: f64,
    /// Levels 1..4; `None` where the level has no memory.
    pub distances: [Option<f64>; 4],
    pub score: f64,
    pub label: Option<u8>,
}

impl ScoreRecord {
    pub fn normality(&self) -> f64 {
        1.0 - self.score
    }
}

pub const SCORE_CSV_HEADER: &str = "frame,S_p,S_d1,S_d2,S_d3,S_d4,S,N_s,label";

fn fmt(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn score_csv_row(r: &ScoreRecord) -> String {
    let d: Vec<String> = r.distances.iter().map(|d| d.map_or(String::new(), fmt)).collect();
    format!(
        "{},{},{},{},{},{}",
        r.frame,
        fmt(r.psnr),
        d.join(","),
        fmt(r.score),
        fmt(r.normality()),
        r.label.map_or(String::new(), |l| l.to_string()),
    )
}

/// Records for one video from raw measurements and fused scores.
pub fn records(raw: &RawScores, scores: &[f64]) -> Vec<ScoreRecord> {
    (0..raw.psnr.len())
        .map(|i| {
            let mut distances = [None; 4];
            for (seq, &lvl) in raw.distances.iter().zip(&raw.levels) {
                distances[lvl - 1] = Some(seq[i]);
            }
            ScoreRecord {
                frame: raw.frames[i],
                psnr: raw.psnr[i],
                distances,
                score: scores[i],
                label: raw.labels.as_ref().map(|l| l[i]),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        // [0,1] values p=1 vs t=0.9 → max 1, MSE 0.01 → 20 dB
        let p = Tensor::new(&[2], vec![1.0f64, 1.0]).unwrap();
        let t = Tensor::new(&[2], vec![0.8f64, 0.8]).unwrap();
        assert!((psnr(&p, &t).unwrap() - 20.0).abs() < 1e-9);
        let t = Tensor::new(&[2], vec![-1.0f64, -1.0]).unwrap();
        assert!(psnr(&p, &t).unwrap().abs() < 1e-12);
        assert!((psnr(&p, &p).unwrap() - 80.0).abs() < 1e-9);
    }

    #[test]
    fn minmax_cases() {
        let g = minmax_normalize(&[2.0, 4.0, 6.0]);
        assert!(g[0] == 0.0 && (g[1] - 0.5).abs() < 1e-8 && (g[2] - 1.0).abs() < 1e-8);
        assert_eq!(minmax_normalize(&[5.0, 5.0]), [0.0, 0.0]);
    }

    #[test]
    fn fused_extremes() {
        assert_eq!(fuse(1.0, Some(0.0), 0.8), 0.0);
        assert_eq!(fuse(0.0, Some(1.0), 0.8), 1.0);
        assert_eq!(fuse(0.25, Some(0.9), 1.0), 0.75);
        assert_eq!(fuse(0.25, None, 0.8), 0.75);
    }

    #[test]
    fn auc_reference_cases() {
        assert_eq!(frame_level_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(frame_level_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(frame_level_auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert!(matches!(frame_level_auc(&[0.1, 0.2], &[0, 0]), Err(Error::SingleClass(_))));
    }

    #[test]
    fn csv_row_has_nine_fields() {
        let r = ScoreRecord {
            frame: 7,
            psnr: 30.0,
            distances: [Some(1.0), None, None, Some(0.5)],
            score: 0.25,
            label: Some(1),
        };
        let row = score_csv_row(&r);
        assert_eq!(row.split(',').count(), 9, "{row}");
        assert!(row.starts_with("7,3.00000000e1,1.00000000e0,,,5.00000000e-1,2.50000000e-1,7.50000000e-1,1"));
    }
}
