//! Reverse-mode automatic differentiation over coarse-grained tensor ops.
//!
//! A [`Graph`] is a per-sample tape. Every op computes its forward value
//! eagerly and, when any input is tracked, records a closure that maps the
//! output gradient to input gradients. Nodes are appended in evaluation
//! order, so walking the tape backwards is a valid topological order.
//!
//! Graphs are single-threaded; data parallelism happens one level up, with
//! one graph per sample and a shared read-only [`ParamStore`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{hwc, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// A value on the tape. Cloning is cheap.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    // `None` marks a leaf.
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    grad_enabled: bool,
    nodes: RefCell<Vec<Node<T>>>,
    param_vars: RefCell<HashMap<ParamId, Var<T>>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a tracked leaf created by [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|i| self.grads.get(i).and_then(|g| g.as_ref()))
    }

    /// Per-parameter gradients aligned with the store's ids; untouched parameters are `None`.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; n_params];
        for (pid, node) in std::mem::take(&mut self.param_nodes) {
            out[pid.index()] = self.grads[node].take();
        }
        out
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A tape that records gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::build(Some(params), true)
    }

    /// A tape that only evaluates; no closures or intermediates are kept.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::build(Some(params), false)
    }

    /// A tape without parameters, for testing free-standing ops.
    pub fn standalone(grad_enabled: bool) -> Graph<'static, T> {
        Graph::build(None, grad_enabled)
    }

    fn build(params: Option<&'p ParamStore<T>>, grad_enabled: bool) -> Self {
        Graph {
            params,
            grad_enabled,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, t: Tensor<T>, track: bool) -> Var<T> {
        let id = if track && self.grad_enabled {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            value: Arc::new(t),
            id,
        }
    }

    /// An input leaf; gradients flow to it when `requires_grad`.
    pub fn input(&self, t: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.leaf(t, requires_grad)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        self.leaf(t, false)
    }

    /// The parameter `id` as a tracked leaf. Repeated calls return the same leaf.
    pub fn param(&self, id: ParamId) -> Var<T> {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return v.clone();
        }
        let store = self
            .params
            .expect("Graph::param on a graph built without a parameter store");
        let value = store.shared(id);
        let id_node = if self.grad_enabled {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        let v = Var { value, id: id_node };
        self.param_vars.borrow_mut().insert(id, v.clone());
        v
    }

    /// Records an op. `backward` receives the output gradient and a flag per
    /// input saying whether that input needs a gradient, and returns one
    /// entry per input in the same order.
    pub(crate) fn record<F>(&self, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Var {
                value: Arc::new(value),
                id: None,
            };
        }
        let parents: Vec<usize> = inputs.iter().map(|v| v.id.unwrap_or(usize::MAX)).collect();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward: Some(Box::new(backward)),
        });
        Var {
            value: Arc::new(value),
            id: Some(nodes.len() - 1),
        }
    }

    /// Back-propagates from a scalar (single-element) output.
    pub fn backward(&self, out: &Var<T>) -> Result<Gradients<T>> {
        if out.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("expected a scalar output, got shape {:?}", out.shape()),
            ));
        }
        self.backward_with(out, Tensor::from_parts(out.shape().to_vec(), vec![T::one()]))
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, out: &Var<T>, seed: Tensor<T>) -> Result<Gradients<T>> {
        seed.expect_shape("backward", out.shape())?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let param_nodes: Vec<(ParamId, usize)> = self
            .param_vars
            .borrow()
            .iter()
            .filter_map(|(pid, v)| v.id.map(|n| (*pid, n)))
            .collect();
        let Some(root) = out.id else {
            return Ok(Gradients { grads, param_nodes });
        };
        grads[root] = Some(seed);
        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| p != usize::MAX).collect();
            let pgrads = bw(&g, &needs);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if p == usize::MAX {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads, param_nodes })
    }

    // ------------------------------------------------------------------
    // element-wise

    fn same_shape(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                op,
                format!("operands differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("add", a, b)?;
        let mut out = a.to_tensor();
        out.add_assign(b.value());
        Ok(self.record(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.record(out, &[a, b], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, need| {
            let ga = need[0].then(|| zip_map(g, &bv, |g, y| g * y));
            let gb = need[1].then(|| zip_map(g, &av, |g, x| g * x));
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value.map(|v| v * c);
        self.record(out, &[a], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    fn unary(&self, a: &Var<T>, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Var<T> {
        let out = a.value.map(f);
        let av = a.value.clone();
        self.record(out, &[a], move |g, _| vec![Some(zip_map(g, &av, |g, x| g * df(x)))])
    }

    pub fn silu(&self, a: &Var<T>) -> Var<T> {
        self.unary(
            a,
            |x| x * x.sigmoid(),
            |x| {
                let s = x.sigmoid();
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
        self.unary(
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x| {
                let t = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
            },
        )
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |x| x.sigmoid(), |x| {
            let s = x.sigmoid();
            s * (T::one() - s)
        })
    }

    pub fn softplus(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |x| x.softplus(), |x| x.sigmoid())
    }

    pub fn tanh(&self, a: &Var<T>) -> Var<T> {
        self.unary(a, |x| x.tanh(), |x| {
            let t = x.tanh();
            T::one() - t * t
        })
    }

    // ------------------------------------------------------------------
    // channel broadcasts (innermost axis)

    fn channel_vec(op: &'static str, x: &Var<T>, v: &Var<T>) -> Result<usize> {
        let c = x.value.last_dim();
        if v.value.len() != c {
            return Err(Error::dim(op, "channel", c, v.value.len()));
        }
        Ok(c)
    }

    /// `x + v` with `v` broadcast over every position.
    pub fn add_channel(&self, x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        let c = Self::channel_vec("add_channel", x, v)?;
        let mut out = x.to_tensor();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(v.data()) {
                *o += b;
            }
        }
        Ok(self.record(out, &[x, v], move |g, need| {
            let gv = need[1].then(|| channel_sum(g, c));
            vec![Some(g.clone()), gv]
        }))
    }

    /// `x ⊙ v` with `v` broadcast over every position.
    pub fn mul_channel(&self, x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        let c = Self::channel_vec("mul_channel", x, v)?;
        let mut out = x.to_tensor();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &s) in row.iter_mut().zip(v.data()) {
                *o *= s;
            }
        }
        let (xv, vv) = (x.value.clone(), v.value.clone());
        Ok(self.record(out, &[x, v], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for row in gx.data_mut().chunks_mut(c) {
                    for (o, &s) in row.iter_mut().zip(vv.data()) {
                        *o *= s;
                    }
                }
                gx
            });
            let gv = need[1].then(|| {
                let mut acc = vec![T::zero(); c];
                for (gr, xr) in g.data().chunks(c).zip(xv.data().chunks(c)) {
                    for j in 0..c {
                        acc[j] += gr[j] * xr[j];
                    }
                }
                Tensor::from_parts(vec![c], acc)
            });
            vec![gx, gv]
        }))
    }

    // ------------------------------------------------------------------
    // dense layers

    /// `x · W + b` over the innermost axis; `W` is `Cin × Cout`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let [cin, cout] = *w.shape() else {
            return Err(Error::shape("linear", "weight must be rank 2"));
        };
        if x.value.last_dim() != cin {
            return Err(Error::dim("linear", "in_features", cin, x.value.last_dim()));
        }
        if let Some(b) = b {
            if b.value.len() != cout {
                return Err(Error::dim("linear", "bias", cout, b.value.len()));
            }
        }
        let rows = x.value.rows();
        let mut out = vec![T::zero(); rows * cout];
        matmul_into(x.data(), w.data(), &mut out, rows, cin, cout);
        if let Some(b) = b {
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(b.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::from_parts(shape, out);
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let xshape = x.shape().to_vec();
        let inputs: Vec<&Var<T>> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        Ok(self.record(out, &inputs, move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); rows * cin];
                matmul_bt_into(g.data(), wv.data(), &mut gx, rows, cout, cin);
                Tensor::from_parts(xshape.clone(), gx)
            });
            let gw = need[1].then(|| {
                let mut gw = vec![T::zero(); cin * cout];
                matmul_at_into(xv.data(), g.data(), &mut gw, rows, cin, cout);
                Tensor::from_parts(vec![cin, cout], gw)
            });
            let mut res = vec![gx, gw];
            if need.len() == 3 {
                res.push(need[2].then(|| channel_sum(g, cout)));
            }
            res
        }))
    }

    /// Plain matrix product of `M × K` and `K × N`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let ([m, k], [k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape("matmul", "operands must be rank 2"));
        };
        let (m, k, n) = (*m, *k, *n);
        if k != *k2 {
            return Err(Error::dim("matmul", "inner", k, *k2));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(Tensor::from_parts(vec![m, n], out), &[a, b], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                matmul_bt_into(g.data(), bv.data(), &mut ga, m, n, k);
                Tensor::from_parts(vec![m, k], ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                matmul_at_into(av.data(), g.data(), &mut gb, m, k, n);
                Tensor::from_parts(vec![k, n], gb)
            });
            vec![ga, gb]
        }))
    }

    /// Layer normalization over the innermost axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        let c = Self::channel_vec("layer_norm", x, gamma)?;
        Self::channel_vec("layer_norm", x, beta)?;
        let rows = x.value.rows();
        let eps = T::of(LN_EPS);
        let cf = T::of(c as f64);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<T>() / cf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                xhat[r * c + j] = (xr[j] - mean) * rs;
            }
        }
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = xhat[r * c + j] * gamma.data()[j] + beta.data()[j];
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let gv = gamma.value.clone();
        let shape = x.shape().to_vec();
        Ok(self.record(out, &[x, gamma, beta], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); rows * c];
                for r in 0..rows {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        let gh = gd[r * c + j] * gv.data()[j];
                        s1 += gh;
                        s2 += gh * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let gh = gd[r * c + j] * gv.data()[j];
                        gx[r * c + j] = rstd[r] / cf * (cf * gh - s1 - xhat[r * c + j] * s2);
                    }
                }
                Tensor::from_parts(shape.clone(), gx)
            });
            let gg = need[1].then(|| {
                let mut acc = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        acc[j] += gd[r * c + j] * xhat[r * c + j];
                    }
                }
                Tensor::from_parts(vec![c], acc)
            });
            let gb = need[2].then(|| channel_sum(g, c));
            vec![gx, gg, gb]
        }))
    }

    /// Depth-wise 2-D convolution with same padding. `w` is `k × k × C`, `k` odd.
    pub fn dwconv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let (h, wd, c) = hwc(x.shape(), "dwconv2d")?;
        let [k, k2, wc] = *w.shape() else {
            return Err(Error::shape("dwconv2d", "kernel must be k×k×C"));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("dwconv2d", format!("kernel must be square and odd, got {k}×{k2}")));
        }
        if wc != c {
            return Err(Error::dim("dwconv2d", "channel", c, wc));
        }
        if let Some(b) = b {
            if b.value.len() != c {
                return Err(Error::dim("dwconv2d", "bias", c, b.value.len()));
            }
        }
        let out = dwconv_forward(x.data(), w.data(), b.map(|b| b.data()), h, wd, c, k);
        let out = Tensor::from_parts(vec![h, wd, c], out);
        let (xv, wv) = (x.value.clone(), w.value.clone());
        let inputs: Vec<&Var<T>> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        Ok(self.record(out, &inputs, move |g, need| {
            let (gx, gw) = dwconv_backward(g.data(), xv.data(), wv.data(), h, wd, c, k, need[0], need[1]);
            let mut res = vec![
                gx.map(|d| Tensor::from_parts(vec![h, wd, c], d)),
                gw.map(|d| Tensor::from_parts(vec![k, k, c], d)),
            ];
            if need.len() == 3 {
                res.push(need[2].then(|| channel_sum(g, c)));
            }
            res
        }))
    }

    // ------------------------------------------------------------------
    // layout

    /// `out[i] = x[idx[i]]` over rows of the innermost axis of `x`; the
    /// gathered rows are laid out contiguously and viewed as `out_shape`.
    pub fn gather_rows(&self, x: &Var<T>, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<T>> {
        let c = x.value.last_dim();
        let rows = x.value.rows();
        if out_shape.iter().product::<usize>() != idx.len() * c {
            return Err(Error::shape(
                "gather_rows",
                format!("output shape {out_shape:?} incompatible with {} rows of {c}", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row index {bad} out of range {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(out_shape.to_vec(), out);
        let xshape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![T::zero(); rows * c];
            for (o, &i) in idx.iter().enumerate() {
                let dst = &mut gx[i * c..(i + 1) * c];
                for (d, &s) in dst.iter_mut().zip(&g.data()[o * c..(o + 1) * c]) {
                    *d += s;
                }
            }
            vec![Some(Tensor::from_parts(xshape.clone(), gx))]
        }))
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.to_tensor().reshape(shape)?;
        let xshape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            vec![Some(Tensor::from_parts(xshape.clone(), g.data().to_vec()))]
        }))
    }

    /// Concatenation along the innermost axis.
    pub fn concat_channels(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (ca, cb) = (a.value.last_dim(), b.value.last_dim());
        if a.value.rows() != b.value.rows() || a.value.rank() != b.value.rank() {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let rows = a.value.rows();
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(a.value.row(r));
            out.extend_from_slice(b.value.row(r));
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.record(Tensor::from_parts(shape, out), &[a, b], move |g, _| {
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for r in 0..rows {
                let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            vec![
                Some(Tensor::from_parts(sa.clone(), ga)),
                Some(Tensor::from_parts(sb.clone(), gb)),
            ]
        }))
    }

    /// Columns `start..start+len` of the innermost axis.
    pub fn slice_channels(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let c = x.value.last_dim();
        if start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} exceeds {c} channels", start + len),
            ));
        }
        let rows = x.value.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.value.row(r)[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let xshape = x.shape().to_vec();
        Ok(self.record(Tensor::from_parts(shape, out), &[x], move |g, _| {
            let mut gx = vec![T::zero(); rows * c];
            for r in 0..rows {
                gx[r * c + start..r * c + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::from_parts(xshape.clone(), gx))]
        }))
    }

    // ------------------------------------------------------------------
    // pooling and reductions

    /// Mean over all positions, one value per channel.
    pub fn spatial_mean(&self, x: &Var<T>) -> Var<T> {
        let c = x.value.last_dim();
        let rows = x.value.rows();
        let inv = T::one() / T::of(rows as f64);
        let out = channel_sum(x.value(), c).map(|v| v * inv);
        let xshape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| {
            let gx: Vec<T> = (0..rows * c).map(|i| g.data()[i % c] * inv).collect();
            vec![Some(Tensor::from_parts(xshape.clone(), gx))]
        })
    }

    /// Max over all positions, one value per channel; ties route to the first position.
    pub fn spatial_max(&self, x: &Var<T>) -> Var<T> {
        let c = x.value.last_dim();
        let rows = x.value.rows();
        let mut best = vec![T::neg_infinity(); c];
        let mut arg = vec![0usize; c];
        for r in 0..rows {
            for (j, &v) in x.value.row(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    arg[j] = r;
                }
            }
        }
        let xshape = x.shape().to_vec();
        self.record(Tensor::from_parts(vec![c], best), &[x], move |g, _| {
            let mut gx = vec![T::zero(); rows * c];
            for j in 0..c {
                gx[arg[j] * c + j] = g.data()[j];
            }
            vec![Some(Tensor::from_parts(xshape.clone(), gx))]
        })
    }

    /// 1-D convolution along a vector with zero padding, no bias; `w` has odd length.
    pub fn conv1d_same(&self, v: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let n = v.value.len();
        let k = w.value.len();
        if k % 2 == 0 {
            return Err(Error::shape("conv1d_same", format!("kernel length {k} must be odd")));
        }
        let p = k / 2;
        let at = move |i: usize, j: usize| -> Option<usize> { (i + j).checked_sub(p).filter(|&s| s < n) };
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            for j in 0..k {
                if let Some(s) = at(i, j) {
                    out[i] += w.data()[j] * v.data()[s];
                }
            }
        }
        let (vv, wv) = (v.value.clone(), w.value.clone());
        let vshape = v.shape().to_vec();
        Ok(self.record(Tensor::from_parts(vshape.clone(), out), &[v, w], move |g, _| {
            let mut gv = vec![T::zero(); n];
            let mut gw = vec![T::zero(); k];
            for i in 0..n {
                for j in 0..k {
                    if let Some(s) = at(i, j) {
                        gv[s] += wv.data()[j] * g.data()[i];
                        gw[j] += vv.data()[s] * g.data()[i];
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(vshape.clone(), gv)),
                Some(Tensor::from_parts(vec![k], gw)),
            ]
        }))
    }

    pub fn sum_all(&self, x: &Var<T>) -> Var<T> {
        let s = x.value.sum();
        let xshape = x.shape().to_vec();
        self.record(Tensor::scalar(s), &[x], move |g, _| {
            vec![Some(Tensor::full(&xshape, g.data()[0]))]
        })
    }

    pub fn mean_all(&self, x: &Var<T>) -> Var<T> {
        let n = T::of(x.value.len() as f64);
        let s = self.sum_all(x);
        self.scale(&s, T::one() / n)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape("mse", a, b)?;
        let n = T::of(a.value.len() as f64);
        let diff: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
        let shape = a.shape().to_vec();
        Ok(self.record(Tensor::scalar(loss), &[a, b], move |g, need| {
            let s = g.data()[0] * T::of(2.0) / n;
            let ga: Vec<T> = diff.iter().map(|&d| d * s).collect();
            let gb = need[1].then(|| Tensor::from_parts(shape.clone(), ga.iter().map(|&v| -v).collect()));
            vec![Some(Tensor::from_parts(shape.clone(), ga)), gb]
        }))
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Sum over all rows, one value per channel.
pub(crate) fn channel_sum<T: Scalar>(g: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::from_parts(vec![c], acc)
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_bt_into<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_at_into<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn dwconv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    h: usize,
    wd: usize,
    c: usize,
    k: usize,
) -> Vec<T> {
    let p = k / 2;
    let mut out = vec![T::zero(); h * wd * c];
    for y in 0..h {
        for xx in 0..wd {
            let orow = &mut out[(y * wd + xx) * c..(y * wd + xx + 1) * c];
            if let Some(b) = b {
                orow.copy_from_slice(b);
            }
            for i in 0..k {
                let Some(sy) = (y + i).checked_sub(p).filter(|&s| s < h) else {
                    continue;
                };
                for j in 0..k {
                    let Some(sx) = (xx + j).checked_sub(p).filter(|&s| s < wd) else {
                        continue;
                    };
                    let xrow = &x[(sy * wd + sx) * c..(sy * wd + sx + 1) * c];
                    let wrow = &w[(i * k + j) * c..(i * k + j + 1) * c];
                    for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn dwconv_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    w: &[T],
    h: usize,
    wd: usize,
    c: usize,
    k: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = k / 2;
    let mut gx = need_x.then(|| vec![T::zero(); h * wd * c]);
    let mut gw = need_w.then(|| vec![T::zero(); k * k * c]);
    for y in 0..h {
        for xx in 0..wd {
            let grow = &g[(y * wd + xx) * c..(y * wd + xx + 1) * c];
            for i in 0..k {
                let Some(sy) = (y + i).checked_sub(p).filter(|&s| s < h) else {
                    continue;
                };
                for j in 0..k {
                    let Some(sx) = (xx + j).checked_sub(p).filter(|&s| s < wd) else {
                        continue;
                    };
                    let src = (sy * wd + sx) * c;
                    let wo = (i * k + j) * c;
                    if let Some(gx) = gx.as_mut() {
                        for ch in 0..c {
                            gx[src + ch] += w[wo + ch] * grow[ch];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        for ch in 0..c {
                            gw[wo + ch] += x[src + ch] * grow[ch];
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}
