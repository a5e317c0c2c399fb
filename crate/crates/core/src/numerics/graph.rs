//! Reverse-mode autodiff over dense matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value and
//! whatever it needs for the backward sweep. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, so building a graph is cheap and the
//! store can be shared read-only by concurrent evaluations.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::rng::{counter_uniform, fnv1a};
use super::tensor::{gemm, gemm_strided};
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Train mode enables dropout, keyed by `(seed, layer key, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64, step: u64 },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Option<Var>, kernel: usize, col: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Mse(Var, Var),
    CumsumRows(Var),
    Radial { x: Var, scale: Vec<f64>, dscale_over_r: Vec<f64> },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    mode: Mode,
    relu_pattern: u64,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new(), mode, relu_pattern: 0xcbf2_9ce4_8422_2325 }
    }

    /// Fingerprint of which ReLU inputs were positive so far. Two evaluations
    /// with equal fingerprints lie on the same smooth piece of the network.
    pub fn relu_pattern(&self) -> u64 {
        self.relu_pattern
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.get(*id).value,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn broadcast_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let r = ra.max(rb);
        let c = ca.max(cb);
        let ok = |x: usize, full: usize| x == full || x == 1;
        if !(ok(ra, r) && ok(rb, r) && ok(ca, c) && ok(cb, c)) {
            return Err(shape_err(op, format!("cannot broadcast {ra}x{ca} with {rb}x{cb}")));
        }
        Ok((r, c))
    }

    fn out_shape(&self, a: Var, b: Var, r: usize, c: usize) -> Vec<usize> {
        for v in [a, b] {
            let t = self.value(v);
            if t.rows() == r && t.cols() == c {
                return t.shape().to_vec();
            }
        }
        vec![r, c]
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (r, c) = self.broadcast_dims(op, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let (ia, ib) = (Bcast::of(ta, r, c), Bcast::of(tb, r, c));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(ta.data()[ia.at(i, j)], tb.data()[ib.at(i, j)]));
            }
        }
        let shape = self.out_shape(a, b, r, c);
        Ok((Tensor::new(shape, out)?, self.rg(&[a, b])))
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut h = self.relu_pattern;
        for &v in self.value(x).data() {
            h = (h ^ u64::from(v > 0.0)).wrapping_mul(0x0100_0000_01b3);
        }
        self.relu_pattern = h;
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Per-row normalization followed by an affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("layer_norm", format!("features {c}, affine {}/{}", self.value(gamma).len(), self.value(beta).len())));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Sequence-major 1-D convolution with "same" zero padding.
    ///
    /// `x` is `T × C_in`, `w` is `kernel × C_in × C_out`, `b` is `C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize) -> Result<Var> {
        let (t, cin) = self.dims(x);
        let wt = self.value(w);
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(shape_err("conv1d", format!("same padding needs an odd kernel, got {kernel}")));
        }
        if wt.shape().len() != 3 || wt.shape()[0] != kernel || wt.shape()[1] != cin {
            return Err(shape_err("conv1d", format!("weight {:?} for kernel {kernel}, input channels {cin}", wt.shape())));
        }
        let cout = wt.shape()[2];
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err("conv1d", format!("bias {} for {cout} outputs", self.value(b).len())));
            }
        }
        let pad = kernel / 2;
        let width = kernel * cin;
        let xv = self.value(x).data();
        let mut col = vec![0.0; t * width];
        for ti in 0..t {
            for k in 0..kernel {
                let src = ti as isize + k as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let s = src as usize;
                    col[ti * width + k * cin..ti * width + (k + 1) * cin].copy_from_slice(&xv[s * cin..(s + 1) * cin]);
                }
            }
        }
        let mut out = vec![0.0; t * cout];
        gemm(t, width, cout, &col, self.value(w).data(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cout) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::matrix(t, cout, out)?, Op::Conv1d { x, w, b, kernel, col }, rg))
    }

    /// Scaled dot-product attention split across `heads`; inputs are already projected.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, d) = self.dims(q);
        let (tk, dk) = self.dims(k);
        let (tv, dv) = self.dims(v);
        if d != dk || d != dv || tk != tv {
            return Err(shape_err("attention", format!("q {tq}x{d}, k {tk}x{dk}, v {tv}x{dv}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("model dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            for i in 0..tq {
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..tk {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    p[i * tk + j] = dot(qi, kj) * scale;
                }
                softmax_in_place(&mut p[i * tk..(i + 1) * tk]);
                for j in 0..tk {
                    let w = p[i * tk + j];
                    let vj = &vv[j * d + off..j * d + off + dh];
                    out[i * d + off..i * d + off + dh].iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(Tensor::matrix(tq, d, out)?, Op::Attention { q, k, v, heads, probs }, rg))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, as `heads` blocks of `Tq × Tk`.
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Tensor>> {
        match &self.nodes[node.0].op {
            Op::Attention { q, k, heads, probs, .. } => {
                let tq = self.value(*q).rows();
                let tk = self.value(*k).rows();
                Some(
                    probs
                        .chunks(tq * tk)
                        .take(*heads)
                        .map(|c| Tensor::matrix(tq, tk, c.to_vec()).expect("attention block"))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, key: &str) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Mode::Train { seed, step } = self.mode else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let key_hash = fnv1a(key.as_bytes());
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> =
            (0..n).map(|i| if counter_uniform(seed, key_hash, step, i as u64) < rate { 0.0 } else { keep }).collect();
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let r = self.dims(first).0;
        if xs.iter().any(|&x| self.dims(x).0 != r) {
            return Err(shape_err("concat", "row counts differ".into()));
        }
        let total: usize = xs.iter().map(|&x| self.dims(x).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.dims(x);
        if start >= end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c}")));
        }
        let t = self.value(x).slice_cols(start, end);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, _) = self.dims(x);
        if start >= end || end > r {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {r}")));
        }
        let t = self.value(x).slice_rows(start, end);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    /// Column means, `T × D -> 1 × D`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(1, c, out).expect("row"), Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.cols() != tb.cols() {
            return Err(shape_err("mean_square_error", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = ta.len() as f64;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Running sum down the rows.
    pub fn cumsum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for i in c..out.len() {
            out[i] += out[i - c];
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::CumsumRows(x), rg)
    }

    /// Rescales each row by a function of its Euclidean norm.
    ///
    /// `f(r)` returns `(s(r), s'(r))`; row `x` maps to `s(‖x‖)·x`.
    pub fn radial_scale(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut scale = Vec::with_capacity(t.rows());
        let mut dscale_over_r = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(c) {
            let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (s, ds) = f(r);
            row.iter_mut().for_each(|v| *v *= s);
            scale.push(s);
            dscale_over_r.push(if r > 0.0 { ds / r } else { 0.0 });
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Radial { x, scale, dscale_over_r }, rg)
    }

    /// Backpropagates from a scalar node and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut entries: Vec<(ParamId, Tensor)> = Vec::new();
        for (id, v) in &self.params {
            if v.0 <= loss.0 {
                if let Some(g) = grads[v.0].take() {
                    let shape = self.store.get(*id).value.shape().to_vec();
                    entries.push((*id, Tensor::new(shape, g)?));
                }
            }
        }
        entries.sort_by_key(|(id, _)| *id);
        Ok(Gradients { entries })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(_) => return,
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = acc(grads, *a, m * k);
                    gemm_strided(m, n, k, g, (n as isize, 1), bv, (1, n as isize), ga, 1.0);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = acc(grads, *b, k * n);
                    gemm_strided(k, m, n, av, (1, k as isize), g, (n as isize, 1), gb, 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (r, c) = (out.rows(), out.cols());
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if self.requires_grad(v) {
                        let bc = Bcast::of(self.value(v), r, c);
                        let gv = acc(grads, v, self.value(v).len());
                        for ii in 0..r {
                            for jj in 0..c {
                                gv[bc.at(ii, jj)] += s * g[ii * c + jj];
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (r, c) = (out.rows(), out.cols());
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.requires_grad(v) {
                        let bc = Bcast::of(self.value(v), r, c);
                        let ot = self.value(other);
                        let bo = Bcast::of(ot, r, c);
                        let od = ot.data();
                        let gv = acc(grads, v, self.value(v).len());
                        for ii in 0..r {
                            for jj in 0..c {
                                gv[bc.at(ii, jj)] += g[ii * c + jj] * od[bo.at(ii, jj)];
                            }
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = acc(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        gx[j] += g[j];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                let gx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let y = out.data();
                let gx = acc(grads, *x, g.len());
                for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dotp = dot(yr, gr);
                    for j in 0..c {
                        gx[r * c + j] += yr[j] * (gr[j] - dotp);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = out.cols();
                let r = out.rows();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let gg = acc(grads, *gamma, c);
                    for ii in 0..r {
                        for j in 0..c {
                            gg[j] += g[ii * c + j] * xhat[ii * c + j];
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = acc(grads, *beta, c);
                    for ii in 0..r {
                        for j in 0..c {
                            gb[j] += g[ii * c + j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = acc(grads, *x, r * c);
                    let n = c as f64;
                    for ii in 0..r {
                        let row = ii * c..(ii + 1) * c;
                        let dxhat: Vec<f64> = g[row.clone()].iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[ii * c + j] += inv_std[ii] / n * (n * dxhat[j] - sum_d - xhat[ii * c + j] * sum_dx);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, kernel, col } => {
                let (t, cin) = self.dims(*x);
                let cout = out.cols();
                let width = kernel * cin;
                if self.requires_grad(*w) {
                    let gw = acc(grads, *w, width * cout);
                    gemm_strided(width, t, cout, col, (1, width as isize), g, (cout as isize, 1), gw, 1.0);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let gb = acc(grads, *b, cout);
                        for row in g.chunks(cout) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data();
                    let mut dcol = vec![0.0; t * width];
                    gemm_strided(t, cout, width, g, (cout as isize, 1), wv, (1, cout as isize), &mut dcol, 0.0);
                    let pad = kernel / 2;
                    let gx = acc(grads, *x, t * cin);
                    for ti in 0..t {
                        for k in 0..*kernel {
                            let src = ti as isize + k as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                let from = &dcol[ti * width + k * cin..ti * width + (k + 1) * cin];
                                gx[s * cin..(s + 1) * cin].iter_mut().zip(from).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, d) = self.dims(*q);
                let tk = self.dims(*k).0;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; tq * d];
                let mut gk = vec![0.0; tk * d];
                let mut gvv = vec![0.0; tk * d];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    for ii in 0..tq {
                        let go = &g[ii * d + off..ii * d + off + dh];
                        let mut dp = vec![0.0; tk];
                        for j in 0..tk {
                            let vj = &vv[j * d + off..j * d + off + dh];
                            dp[j] = dot(go, vj);
                            let w = p[ii * tk + j];
                            gvv[j * d + off..j * d + off + dh].iter_mut().zip(go).for_each(|(a, x)| *a += w * x);
                        }
                        let pr = &p[ii * tk..(ii + 1) * tk];
                        let s = dot(pr, &dp);
                        for j in 0..tk {
                            let ds = pr[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for cc in 0..dh {
                                gq[ii * d + off + cc] += ds * kv[j * d + off + cc];
                                gk[j * d + off + cc] += ds * qv[ii * d + off + cc];
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, gq), (*k, gk), (*v, gvv)] {
                    if self.requires_grad(var) {
                        let gx = acc(grads, var, buf.len());
                        gx.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
            Op::ConcatCols(xs) => {
                let r = out.rows();
                let total = out.cols();
                let mut off = 0;
                for &x in xs {
                    let c = self.dims(x).1;
                    if self.requires_grad(x) {
                        let gx = acc(grads, x, r * c);
                        for ii in 0..r {
                            let src = &g[ii * total + off..ii * total + off + c];
                            gx[ii * c..(ii + 1) * c].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.dims(*x);
                let w = out.cols();
                let gx = acc(grads, *x, r * c);
                for ii in 0..r {
                    let dst = &mut gx[ii * c + start..ii * c + start + w];
                    dst.iter_mut().zip(&g[ii * w..(ii + 1) * w]).for_each(|(a, v)| *a += v);
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.dims(*x);
                let gx = acc(grads, *x, r * c);
                gx[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x);
                let gx = acc(grads, *x, r * c);
                for row in gx.chunks_mut(c) {
                    row.iter_mut().zip(g).for_each(|(a, v)| *a += v / r as f64);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = acc(grads, *x, n);
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let n = ta.len() as f64;
                for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                    if self.requires_grad(v) {
                        let gv = acc(grads, v, ta.len());
                        for j in 0..ta.len() {
                            gv[j] += s * g[0] * 2.0 * (ta[j] - tb[j]) / n;
                        }
                    }
                }
            }
            Op::CumsumRows(x) => {
                let c = out.cols();
                let mut rev = g.to_vec();
                for j in (0..rev.len().saturating_sub(c)).rev() {
                    rev[j] += rev[j + c];
                }
                let gx = acc(grads, *x, g.len());
                gx.iter_mut().zip(&rev).for_each(|(a, v)| *a += v);
            }
            Op::Radial { x, scale, dscale_over_r } => {
                let c = out.cols();
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for (r, (s, k)) in scale.iter().zip(dscale_over_r).enumerate() {
                    let row = r * c..(r + 1) * c;
                    let proj = dot(&xv[row.clone()], &g[row.clone()]);
                    for j in row {
                        gx[j] += s * g[j] + k * proj * xv[j];
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Index map for an operand broadcast to `rows × cols`.
struct Bcast {
    row_stride: usize,
    col_step: usize,
}

impl Bcast {
    fn of(t: &Tensor, rows: usize, cols: usize) -> Self {
        let (r, c) = (t.rows(), t.cols());
        Self {
            row_stride: if r == rows && rows > 1 { c } else { 0 },
            col_step: if c == cols && cols > 1 { 1 } else { 0 },
        }
    }

    fn at(&self, i: usize, j: usize) -> usize {
        i * self.row_stride + j * self.col_step
    }
}
