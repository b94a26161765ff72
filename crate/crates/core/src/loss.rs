//! Training objectives.
//!
//! `total = L_p + λ_c Σ L_c + λ_s Σ L_s` where `L_p` is the squared
//! prediction error, `L_c` the summed squared distance of each query to its
//! nearest item and `L_s` the mean gap between first and second nearest.
//!
//! [`prediction_loss`] is the per-pixel mean. Inside [`objective`] it is
//! rescaled to the unreduced sum by default so that it keeps the same scale
//! as the query-summed compactness term.

use crate::blocks::LEVELS;
use crate::config::{Reduction, TrainSettings};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::memory::{nearest_item, nearest_two_items, row_sq_dist_op, MemoryBank};
use crate::model::ForwardOutput;
use crate::scalar::Scalar;

/// Weights and switches of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub compact: f64,
    pub sparse: f64,
    pub use_compactness: bool,
    pub use_sparsity: bool,
    pub prediction_reduction: Reduction,
    pub compact_reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            compact: 0.1,
            sparse: 0.01,
            use_compactness: true,
            use_sparsity: true,
            prediction_reduction: Reduction::Sum,
            compact_reduction: Reduction::Sum,
        }
    }
}

impl From<&TrainSettings> for LossWeights {
    fn from(s: &TrainSettings) -> Self {
        LossWeights {
            compact: s.lambda_compact,
            sparse: s.lambda_sparse,
            use_compactness: s.use_compactness,
            use_sparsity: s.use_sparsity,
            prediction_reduction: s.prediction_reduction,
            compact_reduction: s.compactness_reduction,
        }
    }
}

/// Component values; levels without memory contribute zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub prediction: f64,
    pub compactness: [f64; LEVELS],
    pub sparsity: [f64; LEVELS],
    pub total: f64,
}

impl LossBreakdown {
    pub fn compactness_total(&self) -> f64 {
        self.compactness.iter().sum()
    }

    pub fn sparsity_total(&self) -> f64 {
        self.sparsity.iter().sum()
    }
}

/// The weighted sum on plain numbers; disabled terms are dropped entirely.
pub fn total_loss(prediction: f64, compactness: &[f64], sparsity: &[f64], w: &LossWeights) -> f64 {
    let mut t = prediction;
    if w.use_compactness {
        t += w.compact * compactness.iter().sum::<f64>();
    }
    if w.use_sparsity {
        t += w.sparse * sparsity.iter().sum::<f64>();
    }
    t
}

pub fn prediction_loss<T: Scalar>(g: &Graph<'_, T>, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
    g.mse(pred, target)
}

/// `Σ_i ‖q_i − m¹_i‖²`.
pub fn compactness_loss<T: Scalar>(g: &Graph<'_, T>, queries: &Var<T>, items: &Var<T>) -> Result<Var<T>> {
    let idx = nearest_item(queries.value(), items.value())?.into_iter().map(|(j, _)| j).collect();
    Ok(g.sum_all(&row_sq_dist_op(g, queries, items, idx)?))
}

/// `mean_i (‖q_i − m¹_i‖² − ‖q_i − m²_i‖²)`; never positive.
pub fn sparsity_loss<T: Scalar>(g: &Graph<'_, T>, queries: &Var<T>, items: &Var<T>) -> Result<Var<T>> {
    let pairs = nearest_two_items(queries.value(), items.value())?;
    let first = row_sq_dist_op(g, queries, items, pairs.iter().map(|p| p.first).collect())?;
    let second = row_sq_dist_op(g, queries, items, pairs.iter().map(|p| p.second).collect())?;
    Ok(g.mean_all(&g.sub(&first, &second)?))
}

/// Builds the objective on the tape. Inactive terms are not recorded, so
/// they contribute neither value nor gradient.
pub fn objective<T: Scalar>(
    g: &Graph<'_, T>,
    out: &ForwardOutput<T>,
    target: &Var<T>,
    banks: &[Option<&MemoryBank>],
    w: &LossWeights,
) -> Result<(Var<T>, LossBreakdown)> {
    let mut lp = prediction_loss(g, &out.prediction, target)?;
    if w.prediction_reduction == Reduction::Sum {
        lp = g.scale(&lp, T::of(target.value().len() as f64));
    }
    let mut br = LossBreakdown {
        prediction: lp.data()[0].f64(),
        ..LossBreakdown::default()
    };
    let mut total = lp;
    for (i, (lvl, bank)) in out.levels.iter().zip(banks).enumerate() {
        let (Some(q), Some(bank)) = (&lvl.queries, bank) else {
            continue;
        };
        let items = g.param(bank.items);
        if w.use_compactness {
            let mut lc = compactness_loss(g, q, &items)?;
            if w.compact_reduction == Reduction::Mean {
                lc = g.scale(&lc, T::of(1.0 / q.value().rows() as f64));
            }
            br.compactness[i] = lc.data()[0].f64();
            total = g.add(&total, &g.scale(&lc, T::of(w.compact)))?;
        }
        if w.use_sparsity {
            let ls = sparsity_loss(g, q, &items)?;
            br.sparsity[i] = ls.data()[0].f64();
            total = g.add(&total, &g.scale(&ls, T::of(w.sparse)))?;
        }
    }
    br.total = total.data()[0].f64();
    Ok((total, br))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, &[0.0; 4], &[0.0; 4], &w), 1.0);
        assert!((total_loss(0.0, &[1.0; 4], &[0.0; 4], &w) - 0.4).abs() < 1e-15);
        let only_p = LossWeights {
            use_compactness: false,
            use_sparsity: false,
            ..w
        };
        assert_eq!(total_loss(0.25, &[3.0; 4], &[-7.0; 4], &only_p), 0.25);
    }

    #[test]
    fn prediction_offset() {
        let g = Graph::<f64>::standalone(false);
        let a = random_tensor(&[4, 4, 3], 1, 1.0);
        let b = a.map(|v| v + 0.1);
        let l = prediction_loss(&g, &g.constant(a.clone()), &g.constant(b)).unwrap();
        assert!((l.data()[0] - 0.01).abs() < 1e-12);
        let l = prediction_loss(&g, &g.constant(a.clone()), &g.constant(a)).unwrap();
        assert_eq!(l.data()[0], 0.0);
    }

    #[test]
    fn memory_terms_reference() {
        let g = Graph::<f64>::standalone(false);
        let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let lc = compactness_loss(&g, &q, &g.constant(t(&[1, 2], &[0.0, 0.0]))).unwrap();
        assert_eq!(lc.data()[0], 1.0);
        let m = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(sparsity_loss(&g, &q, &m).unwrap().data()[0], -2.0);
        let eq = g.constant(t(&[1, 2], &[1.0, 1.0]));
        assert_eq!(sparsity_loss(&g, &eq, &m).unwrap().data()[0], 0.0);
        let mr = random_tensor(&[5, 3], 4, 1.0);
        let qs = g.constant(random_tensor(&[9, 3], 5, 1.0));
        assert!(sparsity_loss(&g, &qs, &g.constant(mr)).unwrap().data()[0] <= 0.0);
    }
}
