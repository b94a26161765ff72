//! Prototype memory: cosine addressing, sparse top-k read, normalized write.
//!
//! Queries are the rows of a feature map flattened row-major, so query `i`
//! is the cell `(i div W, i mod W)`.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{hwc, Tensor};

/// Guard in every norm denominator.
pub const NORM_EPS: f64 = 1e-8;

/// Whether memory may be written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Number of entries kept per row by a `k_percent` top-k read over `n` items.
pub fn kept_count(n: usize, k_percent: f64) -> usize {
    let k = (k_percent * n as f64 / 100.0 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Config(format!("k_percent must lie in (0, 100], got {k_percent}")));
    }
    Ok(())
}

/// `N × C` learnable items plus the `C`-vector balance coefficient.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub level: usize,
    pub items: ParamId,
    pub scale: ParamId,
    pub size: usize,
    pub dim: usize,
    pub k_percent: f64,
}

impl MemoryBank {
    /// Items drawn uniformly from `[-1, 1]` and projected to the unit sphere; scale starts at one.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, level: usize, size: usize, dim: usize, k_percent: f64) -> Result<Self> {
        check_k(k_percent)?;
        if size == 0 || dim == 0 {
            return Err(Error::Config(format!("memory bank {level} must be non-empty")));
        }
        let mut raw: Vec<f64> = (0..size * dim).map(|_| b.rng().random_range(-1.0..1.0)).collect();
        for row in raw.chunks_mut(dim) {
            l2_normalize(row);
        }
        let items = b.tensor("items", Tensor::from_parts(vec![size, dim], raw.into_iter().map(T::of).collect()));
        let scale = b.constant("scale", &[dim], 1.0);
        Ok(MemoryBank {
            level,
            items,
            scale,
            size,
            dim,
            k_percent,
        })
    }

    pub fn param_count(&self) -> usize {
        self.size * self.dim + self.dim
    }
}

fn l2_normalize<T: Scalar>(row: &mut [T]) {
    let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
    let inv = T::one() / (n + T::of(NORM_EPS));
    row.iter_mut().for_each(|v| *v *= inv);
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn check_pair<T: Scalar>(op: &'static str, q: &Tensor<T>, m: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let ([nq, c], [n, c2]) = (q.shape(), m.shape()) else {
        return Err(Error::shape(op, "queries and items must be rank 2"));
    };
    if c != c2 {
        return Err(Error::dim(op, "feature", *c2, *c));
    }
    Ok((*nq, *n, *c))
}

/// `s_ij = q_i·m_j / (‖q_i‖‖m_j‖ + ε)`.
pub fn cosine_similarity<T: Scalar>(q: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let (nq, n, _) = check_pair("cosine_similarity", q, m)?;
    let eps = T::of(NORM_EPS);
    let mnorm: Vec<T> = (0..n).map(|j| norm(m.row(j))).collect();
    let mut out = Vec::with_capacity(nq * n);
    for i in 0..nq {
        let qi = q.row(i);
        let qn = norm(qi);
        for j in 0..n {
            out.push(dot(qi, m.row(j)) / (qn * mnorm[j] + eps));
        }
    }
    Ok(Tensor::from_parts(vec![nq, n], out))
}

/// Cosine similarity on the tape.
pub fn cosine_similarity_op<T: Scalar>(g: &Graph<'_, T>, q: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    let out = cosine_similarity(q.value(), m.value())?;
    let (nq, n, c) = check_pair("cosine_similarity", q.value(), m.value())?;
    let (qv, mv) = (q.value().clone(), m.value().clone());
    Ok(g.record(out, &[q, m], move |gs, need| {
        let eps = T::of(NORM_EPS);
        let qn: Vec<T> = (0..nq).map(|i| norm(qv.row(i))).collect();
        let mn: Vec<T> = (0..n).map(|j| norm(mv.row(j))).collect();
        let mut gq = vec![T::zero(); nq * c];
        let mut gm = vec![T::zero(); n * c];
        for i in 0..nq {
            let qi = qv.row(i);
            for j in 0..n {
                let gij = gs.data()[i * n + j];
                if gij == T::zero() {
                    continue;
                }
                let mj = mv.row(j);
                let a = dot(qi, mj);
                let b = qn[i] * mn[j] + eps;
                let inv_b = T::one() / b;
                let coef = a * inv_b * inv_b;
                // d(a/b)/dq = m/b - a/b² · ‖m‖ q/‖q‖ (the norm term vanishes at q = 0)
                let qterm = if qn[i] > T::zero() { coef * mn[j] / qn[i] } else { T::zero() };
                let mterm = if mn[j] > T::zero() { coef * qn[i] / mn[j] } else { T::zero() };
                if need[0] {
                    for k in 0..c {
                        gq[i * c + k] += gij * (mj[k] * inv_b - qterm * qi[k]);
                    }
                }
                if need[1] {
                    for k in 0..c {
                        gm[j * c + k] += gij * (qi[k] * inv_b - mterm * mj[k]);
                    }
                }
            }
        }
        vec![
            need[0].then(|| Tensor::from_parts(vec![nq, c], gq)),
            need[1].then(|| Tensor::from_parts(vec![n, c], gm)),
        ]
    }))
}

/// Per-row mask of the `kept_count` largest entries; equal values keep the lower index.
pub fn topk_mask<T: Scalar>(w_hat: &Tensor<T>, k_percent: f64) -> Result<Vec<bool>> {
    check_k(k_percent)?;
    let n = w_hat.last_dim();
    let keep = kept_count(n, k_percent);
    let mut mask = vec![false; w_hat.len()];
    let mut order: Vec<usize> = (0..n).collect();
    for r in 0..w_hat.rows() {
        let row = w_hat.row(r);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        for &j in &order[..keep] {
            mask[r * n + j] = true;
        }
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
    }
    Ok(mask)
}

fn masked_softmax<T: Scalar>(w_hat: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let n = w_hat.last_dim();
    let mut out = Vec::with_capacity(w_hat.len());
    for r in 0..w_hat.rows() {
        let z: Vec<T> = w_hat
            .row(r)
            .iter()
            .zip(&mask[r * n..(r + 1) * n])
            .map(|(&v, &keep)| if keep { v } else { T::zero() })
            .collect();
        let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = z.iter().map(|&v| (v - mx).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::from_parts(w_hat.shape().to_vec(), out)
}

/// Keep the top `k%` entries per row, set the rest to zero, then softmax over
/// all `N` positions (zeroed entries participate with value 0).
pub fn topk_softmax<T: Scalar>(w_hat: &Tensor<T>, k_percent: f64) -> Result<Tensor<T>> {
    let mask = topk_mask(w_hat, k_percent)?;
    Ok(masked_softmax(w_hat, &mask))
}

/// Top-k softmax on the tape; the mask is held constant in the backward pass.
pub fn topk_softmax_op<T: Scalar>(g: &Graph<'_, T>, w_hat: &Var<T>, k_percent: f64) -> Result<Var<T>> {
    let mask = topk_mask(w_hat.value(), k_percent)?;
    let out = masked_softmax(w_hat.value(), &mask);
    let n = w_hat.value().last_dim();
    let probs = out.clone();
    Ok(g.record(out, &[w_hat], move |gy, _| {
        let mut gx = vec![T::zero(); probs.len()];
        for r in 0..probs.rows() {
            let p = probs.row(r);
            let gr = &gy.data()[r * n..(r + 1) * n];
            let s = dot(p, gr);
            for j in 0..n {
                if mask[r * n + j] {
                    gx[r * n + j] = p[j] * (gr[j] - s);
                }
            }
        }
        vec![Some(Tensor::from_parts(probs.shape().to_vec(), gx))]
    }))
}

/// Reconstructed queries `q̂_i = w_i M` and the read weights.
pub struct ReadOut<T: Scalar> {
    pub reconstructed: Var<T>,
    pub weights: Tensor<T>,
}

/// Sparse cosine-addressed read of `queries` (`N̂ × C`) from `items` (`N × C`).
pub fn memory_read<T: Scalar>(g: &Graph<'_, T>, queries: &Var<T>, items: &Var<T>, k_percent: f64) -> Result<ReadOut<T>> {
    let sim = cosine_similarity_op(g, queries, items)?;
    let w = topk_softmax_op(g, &sim, k_percent)?;
    let reconstructed = g.matmul(&w, items)?;
    Ok(ReadOut {
        reconstructed,
        weights: w.to_tensor(),
    })
}

/// Memory-augmented feature and the quantities losses and scores need.
pub struct Augmented<T: Scalar> {
    /// `F_m + s ⊙ F_st`, same shape as the input map.
    pub output: Var<T>,
    /// The input map as an `N̂ × C` query set.
    pub queries: Var<T>,
    pub weights: Tensor<T>,
}

/// `F̃ = F_m + s ⊙ F_st` where `F_m` is the read-out reshaped to the map.
pub fn memory_augment<T: Scalar>(g: &Graph<'_, T>, f_st: &Var<T>, bank: &MemoryBank) -> Result<Augmented<T>> {
    let (h, w, c) = hwc(f_st.shape(), "memory_augment")?;
    if c != bank.dim {
        return Err(Error::dim("memory_augment", "channel", bank.dim, c));
    }
    let queries = g.reshape(f_st, &[h * w, c])?;
    let read = memory_read(g, &queries, &g.param(bank.items), bank.k_percent)?;
    let f_m = g.reshape(&read.reconstructed, &[h, w, c])?;
    let scaled = g.mul_channel(f_st, &g.param(bank.scale))?;
    Ok(Augmented {
        output: g.add(&f_m, &scaled)?,
        queries,
        weights: read.weights,
    })
}

/// `m̃_j = L2(m_j + w̃_j Q)` with `w̃_j` the softmax over queries of the
/// cosine similarities of `m_j`. All items update from the old matrix.
pub fn write_items<T: Scalar>(items: &Tensor<T>, queries: &Tensor<T>) -> Result<Tensor<T>> {
    let (nq, n, c) = check_pair("memory_write", queries, items)?;
    if nq == 0 {
        return Ok(items.clone());
    }
    // N̂ × N, read column-wise per item
    let sim = cosine_similarity(queries, items)?;
    let mut out = Vec::with_capacity(n * c);
    for j in 0..n {
        let col: Vec<T> = (0..nq).map(|i| sim.data()[i * n + j]).collect();
        let mx = col.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = col.iter().map(|&v| (v - mx).exp()).collect();
        let s: T = e.iter().copied().sum();
        let mut row = items.row(j).to_vec();
        for (i, &ei) in e.iter().enumerate() {
            let wgt = ei / s;
            for (r, &qv) in row.iter_mut().zip(queries.row(i)) {
                *r += wgt * qv;
            }
        }
        l2_normalize(&mut row);
        out.extend(row);
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Applies [`write_items`] to a bank in place; rejected outside training.
pub fn memory_write<T: Scalar>(store: &mut ParamStore<T>, bank: &MemoryBank, queries: &Tensor<T>, mode: Mode) -> Result<()> {
    if mode != Mode::Train {
        return Err(Error::Contract(format!(
            "memory bank {} is read-only at test time",
            bank.level
        )));
    }
    let updated = write_items(store.get(bank.items), queries)?;
    *store.get_mut(bank.items) = updated;
    Ok(())
}

/// Nearest item by squared L2 distance, lowest index on ties.
pub fn nearest_item<T: Scalar>(q: &Tensor<T>, m: &Tensor<T>) -> Result<Vec<(usize, T)>> {
    let (nq, n, _) = check_pair("nearest_item", q, m)?;
    if n == 0 {
        return Err(Error::Config("memory bank is empty".into()));
    }
    Ok((0..nq)
        .map(|i| {
            let qi = q.row(i);
            let mut best = (0, T::infinity());
            for j in 0..n {
                let d = sq_dist(qi, m.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect())
}

/// First and second nearest items per query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestPair<T> {
    pub first: usize,
    pub first_dist: T,
    pub second: usize,
    pub second_dist: T,
}

/// The two nearest items per query by squared L2 distance; ties broken by lower index.
pub fn nearest_two_items<T: Scalar>(q: &Tensor<T>, m: &Tensor<T>) -> Result<Vec<NearestPair<T>>> {
    let (nq, n, _) = check_pair("nearest_two_items", q, m)?;
    if n < 2 {
        return Err(Error::Config(format!(
            "two nearest items need a bank of at least 2 items, got {n}"
        )));
    }
    Ok((0..nq)
        .map(|i| {
            let qi = q.row(i);
            let (mut f, mut s) = ((usize::MAX, T::infinity()), (usize::MAX, T::infinity()));
            for j in 0..n {
                let d = sq_dist(qi, m.row(j));
                if d < f.1 || f.0 == usize::MAX {
                    s = f;
                    f = (j, d);
                } else if d < s.1 || s.0 == usize::MAX {
                    s = (j, d);
                }
            }
            NearestPair {
                first: f.0,
                first_dist: f.1,
                second: s.0,
                second_dist: s.1,
            }
        })
        .collect())
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// `d_i = ‖q_i − m_{idx_i}‖²` on the tape, `N̂` values.
pub fn row_sq_dist_op<T: Scalar>(g: &Graph<'_, T>, q: &Var<T>, m: &Var<T>, idx: Vec<usize>) -> Result<Var<T>> {
    let (nq, n, c) = check_pair("row_sq_dist", q.value(), m.value())?;
    if idx.len() != nq || idx.iter().any(|&j| j >= n) {
        return Err(Error::shape("row_sq_dist", "index list does not match queries/items"));
    }
    let out: Vec<T> = (0..nq).map(|i| sq_dist(q.value().row(i), m.value().row(idx[i]))).collect();
    let (qv, mv) = (q.value().clone(), m.value().clone());
    Ok(g.record(Tensor::from_parts(vec![nq], out), &[q, m], move |gd, _| {
        let mut gq = vec![T::zero(); nq * c];
        let mut gm = vec![T::zero(); n * c];
        for i in 0..nq {
            let s = T::of(2.0) * gd.data()[i];
            let (qi, mj) = (qv.row(i), mv.row(idx[i]));
            for k in 0..c {
                let d = s * (qi[k] - mj[k]);
                gq[i * c + k] += d;
                gm[idx[i] * c + k] -= d;
            }
        }
        vec![
            Some(Tensor::from_parts(vec![nq, c], gq)),
            Some(Tensor::from_parts(vec![n, c], gm)),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_grad, random_tensor};

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn cosine_orthonormal_and_scale_free() {
        let m = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let s = cosine_similarity(&t(&[1, 2], &[1.0, 0.0]), &m).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-7 && s.data()[1].abs() < 1e-12);
        let s = cosine_similarity(&t(&[1, 2], &[3.0, 4.0]), &t(&[1, 2], &[0.3, 0.4])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn cosine_matches_scalar_loops() {
        let q = random_tensor(&[3, 2], 1, 1.0);
        let m = random_tensor(&[4, 2], 2, 1.0);
        let s = cosine_similarity(&q, &m).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let (a, b) = (q.row(i), m.row(j));
                let num = a[0] * b[0] + a[1] * b[1];
                let den = (a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt();
                assert!((s.data()[i * 4 + j] - num / (den + 1e-8)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn topk_half_of_four() {
        let w = t(&[1, 4], &[0.9, 0.1, 0.5, 0.3]);
        let out = topk_softmax(&w, 50.0).unwrap();
        let z = [0.9f64, 0.0, 0.5, 0.0];
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for j in 0..4 {
            assert!((out.data()[j] - z[j].exp() / s).abs() < 1e-12);
        }
        let full = topk_softmax(&w, 100.0).unwrap();
        let s: f64 = w.data().iter().map(|v| v.exp()).sum();
        for j in 0..4 {
            assert!((full.data()[j] - w.data()[j].exp() / s).abs() < 1e-12);
        }
        assert!(topk_softmax(&w, 0.0).is_err());
        assert!(topk_softmax(&w, 101.0).is_err());
    }

    #[test]
    fn kept_counts() {
        assert_eq!(kept_count(80, 60.0), 48);
        assert_eq!(kept_count(60, 60.0), 36);
        assert_eq!(kept_count(40, 60.0), 24);
        assert_eq!(kept_count(20, 60.0), 12);
        assert_eq!(kept_count(4, 50.0), 2);
        assert_eq!(kept_count(3, 1.0), 1);
        assert_eq!(kept_count(7, 100.0), 7);
    }

    #[test]
    fn read_reference_values() {
        let g = Graph::<f64>::standalone(false);
        let m = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let r = memory_read(&g, &q, &m, 100.0).unwrap();
        // softmax([1, 0]) with the cosine guard
        let s1 = 1.0 / (1.0 + 1e-8);
        let e = 1.0 / (1.0 + (-s1 as f64).exp());
        assert!((r.weights.data()[0] - e).abs() < 1e-12);
        assert!((r.weights.data()[0] - 0.7311).abs() < 1e-4);
        assert!((r.reconstructed.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn single_item_bank_reads_itself() {
        let g = Graph::<f64>::standalone(false);
        let m = g.constant(t(&[1, 3], &[0.2, -0.4, 0.1]));
        let q = g.constant(random_tensor(&[5, 3], 3, 1.0));
        let r = memory_read(&g, &q, &m, 60.0).unwrap();
        for i in 0..5 {
            assert_eq!(r.reconstructed.value().row(i), m.value().row(0));
        }
    }

    #[test]
    fn write_fixed_point_and_norms() {
        let m = t(&[1, 2], &[1.0, 0.0]);
        let q = t(&[1, 2], &[1.0, 0.0]);
        let out = write_items(&m, &q).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-7 && out.data()[1].abs() < 1e-12);

        let out = write_items(&random_tensor(&[6, 4], 4, 1.0), &random_tensor(&[9, 4], 5, 3.0)).unwrap();
        for j in 0..6 {
            let n: f64 = out.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn write_rejected_in_eval() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = crate::params::seeded_rng(0, 0);
        let bank = MemoryBank::new(&mut ParamBuilder::new(&mut store, &mut rng), 1, 4, 3, 60.0).unwrap();
        let q = Tensor::zeros(&[2, 3]);
        assert!(matches!(memory_write(&mut store, &bank, &q, Mode::Eval), Err(Error::Contract(_))));
        assert!(memory_write(&mut store, &bank, &q, Mode::Train).is_ok());
    }

    #[test]
    fn augment_extremes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = crate::params::seeded_rng(0, 0);
        let bank = MemoryBank::new(&mut ParamBuilder::new(&mut store, &mut rng), 1, 5, 3, 60.0).unwrap();
        let f = random_tensor(&[2, 4, 3], 8, 1.0);

        store.get_mut(bank.scale).data_mut().iter_mut().for_each(|v| *v = 0.0);
        {
            let g = Graph::inference(&store);
            let a = memory_augment(&g, &g.constant(f.clone()), &bank).unwrap();
            assert_eq!(a.output.shape(), &[2, 4, 3]);
            let q = g.constant(f.clone().reshape(&[8, 3]).unwrap());
            let r = memory_read(&g, &q, &g.param(bank.items), 60.0).unwrap();
            assert_eq!(a.output.data(), r.reconstructed.data());
        }
        store.get_mut(bank.scale).data_mut().iter_mut().for_each(|v| *v = 1.0);
        store.get_mut(bank.items).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let g = Graph::inference(&store);
        let a = memory_augment(&g, &g.constant(f.clone()), &bank).unwrap();
        assert_eq!(a.output.value(), &f);
    }

    #[test]
    fn nearest_two_reference() {
        let q = t(&[1, 2], &[1.0, 0.0]);
        let m = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let p = nearest_two_items(&q, &m).unwrap()[0];
        assert_eq!((p.first, p.second), (0, 1));
        assert_eq!((p.first_dist, p.second_dist), (0.0, 2.0));

        let same = t(&[3, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let p = nearest_two_items(&q, &same).unwrap()[0];
        assert_eq!((p.first, p.second), (0, 1));

        assert!(nearest_two_items(&q, &t(&[1, 2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn nearest_two_matches_full_sort() {
        let q = random_tensor(&[7, 3], 10, 1.0);
        let m = random_tensor(&[6, 3], 11, 1.0);
        let got = nearest_two_items(&q, &m).unwrap();
        for i in 0..7 {
            let mut d: Vec<(f64, usize)> = (0..6)
                .map(|j| ((0..3).map(|k| (q.row(i)[k] - m.row(j)[k]).powi(2)).sum(), j))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!((got[i].first, got[i].second), (d[0].1, d[1].1));
        }
    }

    #[test]
    fn read_grads_with_constant_mask() {
        let items = random_tensor(&[3, 4], 20, 1.0);
        let queries = random_tensor(&[4, 4], 21, 1.0);
        let it = items.clone();
        check_input_grad(&queries, move |g, q| {
            let m = g.constant(it.clone());
            memory_read(g, q, &m, 60.0).unwrap().reconstructed
        });
        check_input_grad(&items, move |g, m| {
            let q = g.constant(queries.clone());
            memory_read(g, &q, m, 60.0).unwrap().reconstructed
        });
    }

    #[test]
    fn sq_dist_grads() {
        let m = random_tensor(&[3, 2], 30, 1.0);
        check_input_grad(&random_tensor(&[4, 2], 31, 1.0), move |g, q| {
            let mm = g.constant(m.clone());
            row_sq_dist_op(g, q, &mm, vec![2, 0, 1, 2]).unwrap()
        });
    }
}
