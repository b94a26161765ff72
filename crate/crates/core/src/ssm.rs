//! Selective state-space primitives: the S6 recurrence, four-direction
//! cross-scan/merge, SS2D and the vision state-space block.
//!
//! Scan order (fixed, part of the checkpoint contract) for an `H × W` map
//! flattened row-major:
//!
//! | direction | sequence position `l` reads cell |
//! |-----------|----------------------------------|
//! | 0 row-forward    | `l`                        |
//! | 1 row-reverse    | `L-1-l`                    |
//! | 2 column-forward | `(l mod H)·W + l div H`    |
//! | 3 column-reverse | column-forward of `L-1-l`  |
//!
//! so `[[1,2],[3,4]]` scans to `[1,2,3,4]`, `[4,3,2,1]`, `[1,3,2,4]`, `[4,2,3,1]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::{hwc, Tensor};

pub const DIRECTIONS: usize = 4;

/// Hyper-parameters shared by every SS2D in a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    /// State size per channel.
    pub d_state: usize,
    /// Inner width multiplier of the vision block.
    pub expand: usize,
    /// Depth-wise kernel of the vision block.
    pub conv_kernel: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            expand: 2,
            conv_kernel: 3,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

// ----------------------------------------------------------------------
// scan orders

/// Source cell for every sequence position of each direction.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; DIRECTIONS] {
    let l = h * w;
    let row: Vec<usize> = (0..l).collect();
    let col: Vec<usize> = (0..l).map(|i| (i % h) * w + i / h).collect();
    let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
    [row.clone(), rev(&row), col.clone(), rev(&col)]
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// The four direction sequences of a map, each `L × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanDirections<T> {
    pub h: usize,
    pub w: usize,
    pub seqs: [Tensor<T>; DIRECTIONS],
}

pub fn cross_scan<T: Scalar>(x: &Tensor<T>) -> Result<ScanDirections<T>> {
    let (h, w, d) = hwc(x.shape(), "cross_scan")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("cross_scan", "empty map"));
    }
    let orders = scan_orders(h, w);
    let seqs = orders.map(|ord| {
        let mut data = Vec::with_capacity(h * w * d);
        for &cell in &ord {
            data.extend_from_slice(x.row(cell));
        }
        Tensor::from_parts(vec![h * w, d], data)
    });
    Ok(ScanDirections { h, w, seqs })
}

/// Inverse-permutes each direction back to the grid and sums.
pub fn cross_merge<T: Scalar>(dirs: &ScanDirections<T>) -> Result<Tensor<T>> {
    let l = dirs.h * dirs.w;
    let d = dirs.seqs[0].last_dim();
    for s in &dirs.seqs {
        if s.shape() != [l, d] {
            return Err(Error::shape(
                "cross_merge",
                format!("direction sequence {:?} does not match {l}×{d}", s.shape()),
            ));
        }
    }
    let orders = scan_orders(dirs.h, dirs.w);
    let mut out = vec![T::zero(); l * d];
    for (ord, seq) in orders.iter().zip(&dirs.seqs) {
        for (pos, &cell) in ord.iter().enumerate() {
            for (o, &v) in out[cell * d..(cell + 1) * d].iter_mut().zip(seq.row(pos)) {
                *o += v;
            }
        }
    }
    Ok(Tensor::from_parts(vec![dirs.h, dirs.w, d], out))
}

// ----------------------------------------------------------------------
// selective scan kernel

/// Borrowed operands of one selective scan.
///
/// `u`, `delta`: `L × D`; `a`: `D × N` (effective, negative); `b`, `c`: `L × N`; `d_skip`: `D`.
#[derive(Clone, Copy)]
pub struct ScanArgs<'a, T> {
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d_skip: &'a [T],
    pub len: usize,
    pub dim: usize,
    pub state: usize,
}

impl<'a, T: Scalar> ScanArgs<'a, T> {
    pub fn validate(&self) -> Result<()> {
        let (l, d, n) = (self.len, self.dim, self.state);
        let check = |axis: &'static str, expected: usize, actual: usize| {
            if expected != actual {
                Err(Error::dim("selective_scan", axis, expected, actual))
            } else {
                Ok(())
            }
        };
        if l == 0 {
            return Err(Error::shape("selective_scan", "sequence length must be at least 1"));
        }
        check("u (L·D)", l * d, self.u.len())?;
        check("delta (L·D)", l * d, self.delta.len())?;
        check("A (D·N)", d * n, self.a.len())?;
        check("B (L·N)", l * n, self.b.len())?;
        check("C (L·N)", l * n, self.c.len())?;
        check("D_skip (D)", d, self.d_skip.len())
    }
}

/// Hidden states and decay factors kept for the backward pass, each `L × D × N`.
pub struct ScanTrace<T> {
    h: Vec<T>,
    decay: Vec<T>,
}

/// `y_l = C_l·h_l + D⊙u_l`, `h_l = exp(Δ_l A)⊙h_{l-1} + Δ_l B_l u_l`, `h_0 = 0`.
pub fn selective_scan_forward<T: Scalar>(args: &ScanArgs<'_, T>, trace: bool) -> (Vec<T>, Option<ScanTrace<T>>) {
    let (l, d, n) = (args.len, args.dim, args.state);
    let mut y = vec![T::zero(); l * d];
    let mut h = vec![T::zero(); d * n];
    let mut tr = trace.then(|| ScanTrace {
        h: vec![T::zero(); l * d * n],
        decay: vec![T::zero(); l * d * n],
    });
    let mut decay = vec![T::zero(); n];
    for t in 0..l {
        let brow = &args.b[t * n..(t + 1) * n];
        let crow = &args.c[t * n..(t + 1) * n];
        for ch in 0..d {
            let dt = args.delta[t * d + ch];
            let ut = args.u[t * d + ch];
            let du = dt * ut;
            let arow = &args.a[ch * n..(ch + 1) * n];
            for (e, &a) in decay.iter_mut().zip(arow) {
                *e = (dt * a).fast_exp();
            }
            let hrow = &mut h[ch * n..(ch + 1) * n];
            for ((hv, &e), &bv) in hrow.iter_mut().zip(&decay).zip(brow) {
                *hv = e * *hv + du * bv;
            }
            y[t * d + ch] = dot(crow, hrow) + args.d_skip[ch] * ut;
            if let Some(tr) = tr.as_mut() {
                let off = (t * d + ch) * n;
                tr.h[off..off + n].copy_from_slice(hrow);
                tr.decay[off..off + n].copy_from_slice(&decay);
            }
        }
    }
    (y, tr)
}

/// Dot product with eight independent partial sums.
#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Gradients of a selective scan with respect to every operand.
pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d_skip: Vec<T>,
}

pub fn selective_scan_backward<T: Scalar>(args: &ScanArgs<'_, T>, trace: &ScanTrace<T>, gy: &[T]) -> ScanGrads<T> {
    let (l, d, n) = (args.len, args.dim, args.state);
    let mut g = ScanGrads {
        u: vec![T::zero(); l * d],
        delta: vec![T::zero(); l * d],
        a: vec![T::zero(); d * n],
        b: vec![T::zero(); l * n],
        c: vec![T::zero(); l * n],
        d_skip: vec![T::zero(); d],
    };
    // adjoint of h_l, propagated backwards through the decay
    let mut gh = vec![T::zero(); d * n];
    let mut ghs = vec![T::zero(); n];
    let mut gdecay = vec![T::zero(); n];
    let zeros = vec![T::zero(); n];
    for t in (0..l).rev() {
        let brow = &args.b[t * n..(t + 1) * n];
        let crow = &args.c[t * n..(t + 1) * n];
        for ch in 0..d {
            let gyt = gy[t * d + ch];
            let dt = args.delta[t * d + ch];
            let ut = args.u[t * d + ch];
            g.d_skip[ch] += gyt * ut;
            let off = (t * d + ch) * n;
            let hcur = &trace.h[off..off + n];
            let hprev = if t > 0 { &trace.h[off - d * n..off - d * n + n] } else { &zeros[..] };
            let dec = &trace.decay[off..off + n];
            let ghrow = &mut gh[ch * n..(ch + 1) * n];
            for s in 0..n {
                ghs[s] = ghrow[s] + crow[s] * gyt;
                gdecay[s] = ghs[s] * hprev[s] * dec[s];
                ghrow[s] = ghs[s] * dec[s];
            }
            let gcrow = &mut g.c[t * n..(t + 1) * n];
            for (gc, &hv) in gcrow.iter_mut().zip(hcur) {
                *gc += gyt * hv;
            }
            let dtu = dt * ut;
            let gbrow = &mut g.b[t * n..(t + 1) * n];
            for (gb, &v) in gbrow.iter_mut().zip(&ghs) {
                *gb += v * dtu;
            }
            let garow = &mut g.a[ch * n..(ch + 1) * n];
            for (ga, &v) in garow.iter_mut().zip(&gdecay) {
                *ga += v * dt;
            }
            let gb_dot = dot(&ghs, brow);
            g.u[t * d + ch] = gyt * args.d_skip[ch] + dt * gb_dot;
            g.delta[t * d + ch] = dot(&gdecay, &args.a[ch * n..(ch + 1) * n]) + ut * gb_dot;
        }
    }
    g
}

/// Selective scan on the tape. `a_log` holds `log(-A)`; `A = -exp(a_log)`.
pub fn selective_scan_op<T: Scalar>(
    g: &Graph<'_, T>,
    u: &Var<T>,
    delta: &Var<T>,
    a_log: &Var<T>,
    b: &Var<T>,
    c: &Var<T>,
    d_skip: &Var<T>,
) -> Result<Var<T>> {
    let [l, d] = *u.shape() else {
        return Err(Error::shape("selective_scan", format!("u must be L×D, got {:?}", u.shape())));
    };
    let n = a_log.value().last_dim();
    if a_log.shape() != [d, n] {
        return Err(Error::dim("selective_scan", "A rows (D)", d, a_log.shape()[0]));
    }
    let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
    let args = ScanArgs {
        u: u.data(),
        delta: delta.data(),
        a: &a,
        b: b.data(),
        c: c.data(),
        d_skip: d_skip.data(),
        len: l,
        dim: d,
        state: n,
    };
    args.validate()?;
    let track = g.grad_enabled() && [u, delta, a_log, b, c, d_skip].iter().any(|v| v.tracked());
    let (y, trace) = selective_scan_forward(&args, track);
    let out = Tensor::from_parts(vec![l, d], y);
    let (uv, dv, bv, cv, sv) = (
        u.value().clone(),
        delta.value().clone(),
        b.value().clone(),
        c.value().clone(),
        d_skip.value().clone(),
    );
    let trace = trace.map(Arc::new);
    Ok(g.record(out, &[u, delta, a_log, b, c, d_skip], move |gy, _| {
        let trace = trace.as_ref().expect("trace recorded for tracked scan");
        let args = ScanArgs {
            u: uv.data(),
            delta: dv.data(),
            a: &a,
            b: bv.data(),
            c: cv.data(),
            d_skip: sv.data(),
            len: l,
            dim: d,
            state: n,
        };
        let gr = selective_scan_backward(&args, trace, gy.data());
        let ga_log: Vec<T> = gr.a.iter().zip(&a).map(|(&gv, &av)| gv * av).collect();
        vec![
            Some(Tensor::from_parts(vec![l, d], gr.u)),
            Some(Tensor::from_parts(vec![l, d], gr.delta)),
            Some(Tensor::from_parts(vec![d, n], ga_log)),
            Some(Tensor::from_parts(vec![l, n], gr.b)),
            Some(Tensor::from_parts(vec![l, n], gr.c)),
            Some(Tensor::from_parts(vec![d], gr.d_skip)),
        ]
    }))
}

// ----------------------------------------------------------------------
// S6 block

/// Parameters of one S6 direction.
#[derive(Clone, Debug)]
pub struct S6Params {
    pub dim: usize,
    pub state: usize,
    pub dt_rank: usize,
    /// `D × (R + 2N)`: low-rank Δ, B and C from the input.
    pub x_proj: ParamId,
    /// `R × D`.
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    /// `D × N`, `log(-A)`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

pub fn dt_rank(dim: usize) -> usize {
    dim.div_ceil(16)
}

impl S6Params {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, cfg: &SsmConfig) -> Self {
        use rand::Rng;
        let n = cfg.d_state;
        let r = dt_rank(dim);
        let x_proj = b.trunc_normal("x_proj", &[dim, r + 2 * n], 0.02);
        let std = (r as f64).powf(-0.5);
        let dt_proj = b.uniform("dt_proj", &[r, dim], -std, std);
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let bias: Vec<T> = (0..dim)
            .map(|_| {
                let dt = b.rng().random_range(lo..hi).exp().max(1e-4);
                // inverse softplus
                T::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_bias = b.tensor("dt_bias", Tensor::from_parts(vec![dim], bias));
        let a = Tensor::from_fn(&[dim, n], |i| T::of(((i % n) + 1) as f64).ln());
        let a_log = b.tensor("a_log", a);
        let d_skip = b.constant("d_skip", &[dim], 1.0);
        S6Params {
            dim,
            state: n,
            dt_rank: r,
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip,
        }
    }

    /// Data-dependent projections followed by the scan; `u` is `L × D`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, u: &Var<T>) -> Result<Var<T>> {
        if u.value().last_dim() != self.dim {
            return Err(Error::dim("s6", "channel", self.dim, u.value().last_dim()));
        }
        let (r, n) = (self.dt_rank, self.state);
        let xdbl = g.linear(u, &g.param(self.x_proj), None)?;
        let dt_low = g.slice_channels(&xdbl, 0, r)?;
        let b = g.slice_channels(&xdbl, r, n)?;
        let c = g.slice_channels(&xdbl, r + n, n)?;
        let dt = g.linear(&dt_low, &g.param(self.dt_proj), Some(&g.param(self.dt_bias)))?;
        let delta = g.softplus(&dt);
        selective_scan_op(g, u, &delta, &g.param(self.a_log), &b, &c, &g.param(self.d_skip))
    }
}

// ----------------------------------------------------------------------
// SS2D

/// Cross-scan on the tape: four `L × D` sequences.
pub fn cross_scan_op<T: Scalar>(g: &Graph<'_, T>, x: &Var<T>) -> Result<[Var<T>; DIRECTIONS]> {
    let (h, w, d) = hwc(x.shape(), "cross_scan")?;
    let orders = scan_orders(h, w);
    let mut out = Vec::with_capacity(DIRECTIONS);
    for ord in orders {
        out.push(g.gather_rows(x, Arc::new(ord), &[h * w, d])?);
    }
    Ok(out.try_into().map_err(|_| ()).expect("four directions"))
}

/// Cross-merge on the tape.
pub fn cross_merge_op<T: Scalar>(g: &Graph<'_, T>, seqs: &[Var<T>; DIRECTIONS], h: usize, w: usize) -> Result<Var<T>> {
    let orders = scan_orders(h, w);
    let d = seqs[0].value().last_dim();
    let mut acc: Option<Var<T>> = None;
    for (ord, s) in orders.iter().zip(seqs) {
        if s.shape() != [h * w, d] {
            return Err(Error::shape(
                "cross_merge",
                format!("direction sequence {:?} does not match {}×{d}", s.shape(), h * w),
            ));
        }
        let back = g.gather_rows(s, Arc::new(invert(ord)), &[h, w, d])?;
        acc = Some(match acc {
            None => back,
            Some(a) => g.add(&a, &back)?,
        });
    }
    Ok(acc.expect("four directions"))
}

/// 2-D selective scan with one S6 per direction.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub dirs: Vec<S6Params>,
}

impl Ss2d {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, cfg: &SsmConfig) -> Self {
        let dirs = (0..DIRECTIONS)
            .map(|k| S6Params::new(&mut b.sub(&format!("dir{k}")), dim, cfg))
            .collect();
        Ss2d { dirs }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (h, w, _) = hwc(x.shape(), "ss2d")?;
        let seqs = cross_scan_op(g, x)?;
        let mut ys = Vec::with_capacity(DIRECTIONS);
        for (p, s) in self.dirs.iter().zip(&seqs) {
            ys.push(p.forward(g, s)?);
        }
        let ys: [Var<T>; DIRECTIONS] = ys.try_into().map_err(|_| ()).expect("four directions");
        cross_merge_op(g, &ys, h, w)
    }
}

// ----------------------------------------------------------------------
// shared small layers

/// `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut s = b.sub(name);
        let weight = s.trunc_normal("weight", &[in_dim, out_dim], 0.02);
        let bias = bias.then(|| s.constant("bias", &[out_dim], 0.0));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, &g.param(self.weight), b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut s = b.sub(name);
        LayerNorm {
            gamma: s.constant("weight", &[dim], 1.0),
            beta: s.constant("bias", &[dim], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        g.layer_norm(x, &g.param(self.gamma), &g.param(self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct DwConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
}

impl DwConv {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize, kernel: usize, bias: bool) -> Self {
        let mut s = b.sub(name);
        let weight = s.trunc_normal("weight", &[kernel, kernel, dim], 0.02);
        let bias = bias.then(|| s.constant("bias", &[dim], 0.0));
        DwConv { weight, bias, kernel }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let b = self.bias.map(|b| g.param(b));
        g.dwconv2d(x, &g.param(self.weight), b.as_ref())
    }
}

// ----------------------------------------------------------------------
// VSSB

/// Vision state-space block:
/// `x + Linear(SiLU(Linear(x)) ⊙ LN(SS2D(SiLU(DWConv(Linear(x))))))`.
#[derive(Clone, Debug)]
pub struct Vssb {
    pub dim: usize,
    pub inner: usize,
    pub gate_proj: Linear,
    pub in_proj: Linear,
    pub conv: DwConv,
    pub ss2d: Ss2d,
    pub norm: LayerNorm,
    pub out_proj: Linear,
}

impl Vssb {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, cfg: &SsmConfig) -> Self {
        let inner = cfg.expand * dim;
        Vssb {
            dim,
            inner,
            gate_proj: Linear::new(b, "gate_proj", dim, inner, true),
            in_proj: Linear::new(b, "in_proj", dim, inner, true),
            conv: DwConv::new(b, "conv", inner, cfg.conv_kernel, true),
            ss2d: Ss2d::new(&mut b.sub("ss2d"), inner, cfg),
            norm: LayerNorm::new(b, "norm", inner),
            out_proj: Linear::new(b, "out_proj", inner, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, _, c) = hwc(x.shape(), "vssb")?;
        if c != self.dim {
            return Err(Error::dim("vssb", "channel", self.dim, c));
        }
        let x1 = g.silu(&self.gate_proj.forward(g, x)?);
        let z = self.conv.forward(g, &self.in_proj.forward(g, x)?)?;
        let z = self.ss2d.forward(g, &g.silu(&z))?;
        let x2 = self.norm.forward(g, &z)?;
        let mixed = self.out_proj.forward(g, &g.mul(&x1, &x2)?)?;
        g.add(x, &mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_grad, random_tensor};
    use crate::params::{seeded_rng, ParamStore};

    fn grid(h: usize, w: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn(&[h, w, d], |i| i as f64 + 1.0)
    }

    #[test]
    fn cross_scan_two_by_two() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = cross_scan(&x).unwrap();
        assert_eq!(s.seqs[0].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.seqs[1].data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(s.seqs[2].data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.seqs[3].data(), &[4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn cross_scan_degenerate_grids() {
        let one = Tensor::new(&[1, 1, 1], vec![7.0]).unwrap();
        let s = cross_scan(&one).unwrap();
        assert!(s.seqs.iter().all(|q| q.data() == [7.0]));

        let row = grid(1, 5, 2);
        let s = cross_scan(&row).unwrap();
        assert_eq!(s.seqs[0], s.seqs[2]);
        assert_eq!(s.seqs[1], s.seqs[3]);
    }

    #[test]
    fn cross_merge_constants_and_identity() {
        let dirs = ScanDirections {
            h: 2,
            w: 3,
            seqs: std::array::from_fn(|_| Tensor::full(&[6, 2], 1.5)),
        };
        let m = cross_merge(&dirs).unwrap();
        assert!(m.data().iter().all(|&v| v == 6.0));

        let x = grid(3, 4, 2);
        let back = cross_merge(&cross_scan(&x).unwrap()).unwrap();
        assert_eq!(back, x.map(|v| 4.0 * v));
    }

    #[test]
    fn cross_merge_rejects_ragged() {
        let mut dirs = cross_scan(&grid(2, 2, 1)).unwrap();
        dirs.seqs[3] = Tensor::zeros(&[3, 1]);
        assert!(cross_merge(&dirs).is_err());
    }

    #[test]
    fn scan_unrolled_by_hand() {
        // A = 0 so the state never decays
        let args = ScanArgs {
            u: &[1.0f64, 1.0],
            delta: &[1.0, 1.0],
            a: &[0.0],
            b: &[1.0, 1.0],
            c: &[1.0, 1.0],
            d_skip: &[0.0],
            len: 2,
            dim: 1,
            state: 1,
        };
        let (y, tr) = selective_scan_forward(&args, true);
        assert_eq!(y, vec![1.0, 2.0]);
        assert_eq!(tr.unwrap().h, vec![1.0, 2.0]);
    }

    #[test]
    fn scan_zero_input_zero_output() {
        let l = 5;
        let (d, n) = (3, 4);
        let rnd = |len: usize, seed: u64| random_tensor(&[len], seed, 1.0).into_data();
        let (delta, a, b, c, ds) = (rnd(l * d, 1), rnd(d * n, 2), rnd(l * n, 3), rnd(l * n, 4), rnd(d, 5));
        let u = vec![0.0; l * d];
        let args = ScanArgs { u: &u, delta: &delta, a: &a, b: &b, c: &c, d_skip: &ds, len: l, dim: d, state: n };
        let (y, _) = selective_scan_forward(&args, false);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_shape_errors_name_axis() {
        let args = ScanArgs::<f64> {
            u: &[0.0; 6],
            delta: &[0.0; 6],
            a: &[0.0; 5],
            b: &[0.0; 4],
            c: &[0.0; 4],
            d_skip: &[0.0; 3],
            len: 2,
            dim: 3,
            state: 2,
        };
        match args.validate() {
            Err(Error::Dim { axis, expected, actual, .. }) => {
                assert_eq!(axis, "A (D·N)");
                assert_eq!((expected, actual), (6, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn scan_inputs(l: usize, d: usize, n: usize, seed: u64) -> [Tensor<f64>; 6] {
        [
            random_tensor(&[l, d], seed, 1.0),
            random_tensor(&[l, d], seed + 1, 0.5).map(|v| v.abs() + 0.1),
            random_tensor(&[d, n], seed + 2, 1.0),
            random_tensor(&[l, n], seed + 3, 1.0),
            random_tensor(&[l, n], seed + 4, 1.0),
            random_tensor(&[d], seed + 5, 1.0),
        ]
    }

    #[test]
    fn scan_op_grads_every_operand() {
        let ins = scan_inputs(6, 3, 4, 40);
        for which in 0..6 {
            let ins = ins.clone();
            check_input_grad(&ins[which].clone(), move |g, x| {
                let vars: Vec<Var<f64>> = (0..6)
                    .map(|i| if i == which { x.clone() } else { g.constant(ins[i].clone()) })
                    .collect();
                selective_scan_op(g, &vars[0], &vars[1], &vars[2], &vars[3], &vars[4], &vars[5]).unwrap()
            });
        }
    }

    #[test]
    fn scan_is_causal() {
        let [u, delta, a_log, b, c, ds] = scan_inputs(8, 2, 3, 50);
        let a: Vec<f64> = a_log.data().iter().map(|v| -v.exp()).collect();
        let run = |u: &Tensor<f64>| {
            let args = ScanArgs {
                u: u.data(),
                delta: delta.data(),
                a: &a,
                b: b.data(),
                c: c.data(),
                d_skip: ds.data(),
                len: 8,
                dim: 2,
                state: 3,
            };
            selective_scan_forward(&args, false).0
        };
        let y0 = run(&u);
        let mut u2 = u.clone();
        for v in &mut u2.data_mut()[5 * 2..] {
            *v += 3.0;
        }
        let y1 = run(&u2);
        assert_eq!(&y0[..5 * 2], &y1[..5 * 2]);
        assert_ne!(&y0[5 * 2..], &y1[5 * 2..]);
    }

    #[test]
    fn vssb_zero_weights_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(1, 0);
        let block = Vssb::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, &SsmConfig::default());
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_tensor(&[3, 5, 4], 3, 1.0);
        let g = Graph::inference(&store);
        let y = block.forward(&g, &g.constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn vssb_rejects_wrong_width() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(1, 0);
        let block = Vssb::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, &SsmConfig::default());
        let g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[2, 2, 3]));
        assert!(block.forward(&g, &x).is_err());
    }
}
