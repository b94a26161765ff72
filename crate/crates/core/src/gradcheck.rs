//! Central finite-difference gradient checks.
//!
//! The analytic gradient comes from the tape; the numeric one perturbs each
//! coordinate by ±h and re-evaluates the forward pass only, so the two
//! routes share nothing but the forward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error threshold for a passing check.
pub const FD_TOLERANCE: f64 = 1e-3;

/// Uniform tensor in `[-scale, scale)` from a fixed seed.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Outcome of one comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.rel_err < FD_TOLERANCE
    }

    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let (mut diff, mut na, mut nn, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &(a, n) in pairs {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            max_abs = max_abs.max((a - n).abs());
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel_err = if denom < 1e-12 { diff.sqrt() } else { diff.sqrt() / denom };
        GradReport {
            rel_err,
            max_abs_err: max_abs,
            coords: pairs.len(),
        }
    }

    /// Combines reports as if all coordinates had been compared at once.
    pub fn worst(reports: &[GradReport]) -> GradReport {
        reports
            .iter()
            .copied()
            .fold(GradReport { rel_err: 0.0, max_abs_err: 0.0, coords: 0 }, |a, b| GradReport {
                rel_err: a.rel_err.max(b.rel_err),
                max_abs_err: a.max_abs_err.max(b.max_abs_err),
                coords: a.coords + b.coords,
            })
    }
}

/// Projects an arbitrary output to a scalar with fixed random weights so
/// every output coordinate contributes.
fn project<'p>(g: &Graph<'p, f64>, y: &Var<f64>) -> Var<f64> {
    let r = random_tensor(y.shape(), 0x5eed, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, &r).expect("projection shape");
    g.sum_all(&p)
}

/// Compares the tape gradient of `f` with respect to its input against
/// central differences.
pub fn input_grad_report<F>(x: &Tensor<f64>, f: F) -> GradReport
where
    F: for<'p> Fn(&Graph<'p, f64>, &Var<f64>) -> Var<f64>,
{
    input_grad_report_in(&ParamStore::new(), x, f)
}

/// As [`input_grad_report`], with `store` bound to the graph so `f` may read
/// parameters. Parameters are held fixed.
pub fn input_grad_report_in<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> GradReport
where
    F: for<'p> Fn(&Graph<'p, f64>, &Var<f64>) -> Var<f64>,
{
    let g = Graph::new(store);
    let xv = g.input(x.clone(), true);
    let y = f(&g, &xv);
    let loss = project(&g, &y);
    let grads = g.backward(&loss).expect("scalar loss");
    let analytic = grads
        .wrt(&xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor<f64>| -> f64 {
        let g = Graph::inference(store);
        let xv = g.input(t, false);
        let y = f(&g, &xv);
        project(&g, &y).data()[0]
    };
    let mut pairs = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
        pairs.push((analytic.data()[i], numeric));
    }
    GradReport::from_pairs(&pairs)
}

/// Panics unless the input gradient of `f` passes.
pub fn check_input_grad<F>(x: &Tensor<f64>, f: F)
where
    F: for<'p> Fn(&Graph<'p, f64>, &Var<f64>) -> Var<f64>,
{
    let r = input_grad_report(x, f);
    assert!(r.passes(), "gradient check failed: {r:?}");
}

/// Compares parameter gradients of a scalar-valued `f` against central
/// differences on up to `per_param` coordinates of every parameter.
pub fn param_grad_report<F>(store: &ParamStore<f64>, per_param: usize, seed: u64, f: F) -> GradReport
where
    F: for<'p> Fn(&Graph<'p, f64>) -> Var<f64>,
{
    let g = Graph::new(store);
    let loss = f(&g);
    assert_eq!(loss.value().len(), 1, "loss must be scalar");
    let grads = g.backward(&loss).expect("scalar loss").into_param_grads(store.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut pairs = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let lp = f(&Graph::inference(&probe)).data()[0];
            probe.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let lm = f(&Graph::inference(&probe)).data()[0];
            probe.get_mut(id).data_mut()[i] = orig;
            let analytic = grads[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            pairs.push((analytic, (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    GradReport::from_pairs(&pairs)
}
