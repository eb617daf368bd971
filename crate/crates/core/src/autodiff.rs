//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and, when any input
//! tracks gradients, a backward rule. Nodes only ever reference earlier
//! nodes, so the tape is topologically ordered by construction and a single
//! reverse sweep computes all gradients.
//!
//! Model code is written once against [`Ops`]; [`Tape`] records while
//! [`Eager`] only evaluates. Both call the kernels in [`crate::tensor::ops`],
//! so the two paths produce bit-identical values.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::gaussian;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SqDiff(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv { x: Var, w: Var, b: Var, dilation: usize },
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Clamp { x: Var, lo: T, hi: T },
    Softmax { x: Var, axis: usize },
    SumAll(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>),
    Slice { x: Var, axis: usize, start: usize },
    RepeatCols(Var),
    CumSum(Var),
    Reshape(Var),
    Gaussian { mu: Var, sigma: Var, phi: Var },
    Normalize(Var),
    WeightNorm { v: Var, g: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Operation vocabulary shared by the recording tape and the eager evaluator.
pub trait Ops<T: Scalar> {
    type Val: Clone;

    fn value<'a>(&'a self, v: &'a Self::Val) -> &'a Tensor<T>;
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Self::Val>;
    fn constant(&mut self, t: Tensor<T>) -> Result<Self::Val>;

    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn sub(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn mul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn sq_diff(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn scale(&mut self, a: &Self::Val, c: T) -> Result<Self::Val>;
    fn add_scalar(&mut self, a: &Self::Val, c: T) -> Result<Self::Val>;
    fn matmul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn transpose(&mut self, a: &Self::Val) -> Result<Self::Val>;
    fn conv1d(&mut self, x: &Self::Val, w: &Self::Val, b: &Self::Val, dilation: usize) -> Result<Self::Val>;
    fn sigmoid(&mut self, a: &Self::Val) -> Result<Self::Val>;
    fn exp(&mut self, a: &Self::Val) -> Result<Self::Val>;
    fn abs(&mut self, a: &Self::Val) -> Result<Self::Val>;
    fn clamp(&mut self, a: &Self::Val, lo: T, hi: T) -> Result<Self::Val>;
    fn softmax(&mut self, a: &Self::Val, axis: usize, mask: Option<&[bool]>) -> Result<Self::Val>;
    fn sum_all(&mut self, a: &Self::Val) -> Result<Self::Val>;
    fn sum_axis(&mut self, a: &Self::Val, axis: usize) -> Result<Self::Val>;
    fn concat_rows(&mut self, parts: &[Self::Val]) -> Result<Self::Val>;
    fn slice(&mut self, a: &Self::Val, axis: usize, start: usize, len: usize) -> Result<Self::Val>;
    fn repeat_cols(&mut self, a: &Self::Val, times: usize) -> Result<Self::Val>;
    fn cumsum_cols(&mut self, a: &Self::Val) -> Result<Self::Val>;
    fn reshape(&mut self, a: &Self::Val, shape: &[usize]) -> Result<Self::Val>;
    /// Unnormalised Gaussian attention `H×N×M` from `H×N` centres, widths and amplitudes.
    fn gaussian(&mut self, mu: &Self::Val, sigma: &Self::Val, phi: &Self::Val, m: usize) -> Result<Self::Val>;
    /// Column normalisation over `n` with the uniform fallback of [`gaussian::normalize_attention`].
    fn normalize(&mut self, a: &Self::Val) -> Result<Self::Val>;
    /// `w[o] = g[o] · v[o] / ‖v[o]‖` over each output slice of a kernel.
    fn weight_norm(&mut self, v: &Self::Val, g: &Self::Val) -> Result<Self::Val>;

    fn mean_all(&mut self, a: &Self::Val) -> Result<Self::Val> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(&s, T::one() / T::of(n as f64))
    }

    fn mean_axis(&mut self, a: &Self::Val, axis: usize) -> Result<Self::Val> {
        let n = self.value(a).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(&s, T::one() / T::of(n as f64))
    }
}

/// Evaluates operations immediately without recording anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

fn finite<T: Scalar>(t: Tensor<T>, op: &str) -> Result<Tensor<T>> {
    t.ensure_finite(op)?;
    Ok(t)
}

mod kernels {
    //! Forward rules used by both evaluators.
    use super::*;

    pub fn weight_norm<T: Scalar>(v: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let out = v.shape().first().copied().unwrap_or(0);
        if g.numel() != out || out == 0 {
            return Err(Error::shape("weight_norm", format!("{} gains for {:?}", g.numel(), v.shape())));
        }
        let per = v.numel() / out;
        let mut w = v.clone();
        for o in 0..out {
            let slice = &mut w.data_mut()[o * per..(o + 1) * per];
            let norm = slice.iter().map(|x| *x * *x).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::NonFinite("weight_norm of an all-zero kernel".into()));
            }
            let k = g.data()[o] / norm;
            for x in slice.iter_mut() {
                *x *= k;
            }
        }
        Ok(w)
    }
}

impl<T: Scalar> Ops<T> for Eager {
    type Val = Tensor<T>;

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }
    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Tensor<T>> {
        Ok(store.get(id).clone())
    }
    fn constant(&mut self, t: Tensor<T>) -> Result<Tensor<T>> {
        finite(t, "constant")
    }
    fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::add(a, b)?, "add")
    }
    fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::sub(a, b)?, "sub")
    }
    fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::mul(a, b)?, "mul")
    }
    fn sq_diff(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::sq_diff(a, b)?, "sq_diff")
    }
    fn scale(&mut self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        finite(ops::scale(a, c), "scale")
    }
    fn add_scalar(&mut self, a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        finite(ops::add_scalar(a, c), "add_scalar")
    }
    fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::matmul(a, b)?, "matmul")
    }
    fn transpose(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        ops::transpose(a)
    }
    fn conv1d(&mut self, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
        finite(ops::conv1d_causal(x, w, b, dilation)?, "conv1d")
    }
    fn sigmoid(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::sigmoid(a), "sigmoid")
    }
    fn exp(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::exp(a), "exp")
    }
    fn abs(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::abs(a))
    }
    fn clamp(&mut self, a: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
        Ok(ops::clamp(a, lo, hi))
    }
    fn softmax(&mut self, a: &Tensor<T>, axis: usize, mask: Option<&[bool]>) -> Result<Tensor<T>> {
        finite(ops::softmax(a, axis, mask)?, "softmax")
    }
    fn sum_all(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::sum_all(a), "sum")
    }
    fn sum_axis(&mut self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        finite(ops::sum_axis(a, axis)?, "sum_axis")
    }
    fn concat_rows(&mut self, parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        ops::concat_rows(&refs)
    }
    fn slice(&mut self, a: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        ops::slice(a, axis, start, len)
    }
    fn repeat_cols(&mut self, a: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
        ops::repeat_cols(a, times)
    }
    fn cumsum_cols(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        finite(ops::cumsum_cols(a)?, "cumsum")
    }
    fn reshape(&mut self, a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        a.reshape(shape)
    }
    fn gaussian(&mut self, mu: &Tensor<T>, sigma: &Tensor<T>, phi: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
        finite(gaussian::gaussian_kernel(mu, sigma, phi, m)?, "gaussian attention")
    }
    fn normalize(&mut self, a: &Tensor<T>) -> Result<Tensor<T>> {
        finite(gaussian::normalize_attention(a)?, "normalize attention")
    }
    fn weight_norm(&mut self, v: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        finite(kernels::weight_norm(v, g)?, "weight_norm")
    }
}

/// Recording evaluator: the computation record plus per-leaf gradient accumulators.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<(usize, usize), Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    /// A tape that never records backward rules (all values are constants).
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf tensor; `requires_grad` leaves receive gradients on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        let requires_grad = requires_grad && self.grad_enabled;
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data_mut().fill(T::zero());
            }
        }
    }

    /// Leaf gradient of every store parameter bound on this tape.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let key = store as *const ParamStore<T> as usize;
        store
            .ids()
            .map(|id| self.params.get(&(key, id.0)).and_then(|v| self.nodes[v.0].grad.clone()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Back-propagates from a scalar loss, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.nodes[loss.0].value.shape())));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if let Some(acc) = self.nodes[idx].grad.as_mut() {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *v;
                    }
                }
                continue;
            }
            let contributions = self.backward_rule(idx, &g)?;
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                debug_assert!(var.0 < idx, "tape order violated");
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *v;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                g.ensure_finite("backward")?;
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_rule(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, ops::scale(g, -T::one())));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    res.push((*a, ops::mul(g, self.val(*b))?));
                }
                if self.needs(*b) {
                    res.push((*b, ops::mul(g, self.val(*a))?));
                }
            }
            Op::SqDiff(a, b) => {
                let diff = ops::sub(self.val(*a), self.val(*b))?;
                let ga = ops::scale(&ops::mul(&diff, g)?, T::of(2.0));
                if self.needs(*b) {
                    res.push((*b, ops::scale(&ga, -T::one())));
                }
                res.push((*a, ga));
            }
            Op::Scale(a, c) => res.push((*a, ops::scale(g, *c))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    res.push((*a, ops::matmul(g, &ops::transpose(self.val(*b))?)?));
                }
                if self.needs(*b) {
                    res.push((*b, ops::matmul(&ops::transpose(self.val(*a))?, g)?));
                }
            }
            Op::Transpose(a) => res.push((*a, ops::transpose(g)?)),
            Op::Conv { x, w, b, dilation } => {
                res.extend(self.conv_backward(*x, *w, *b, *dilation, g)?);
            }
            Op::Sigmoid(a) => {
                let d = out.data().iter().zip(g.data()).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                res.push((*a, Tensor::new(out.shape().to_vec(), d)?));
            }
            Op::Exp(a) => res.push((*a, ops::mul(g, out)?)),
            Op::Abs(a) => {
                let x = self.val(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.val(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { T::zero() })
                    .collect();
                res.push((*x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::Softmax { x, axis } => {
                let (r, c) = (out.rows(), out.cols());
                let mut d = vec![T::zero(); r * c];
                let (outer, inner, so, si) = if *axis == 0 { (c, r, 1, c) } else { (r, c, c, 1) };
                for o in 0..outer {
                    let mut dot = T::zero();
                    for i in 0..inner {
                        let k = o * so + i * si;
                        dot += g.data()[k] * out.data()[k];
                    }
                    for i in 0..inner {
                        let k = o * so + i * si;
                        d[k] = out.data()[k] * (g.data()[k] - dot);
                    }
                }
                res.push((*x, Tensor::new(vec![r, c], d)?));
            }
            Op::SumAll(a) => {
                res.push((*a, Tensor::full(self.val(*a).shape(), g.item())));
            }
            Op::SumAxis(a, axis) => {
                let x = self.val(*a);
                let (r, c) = (x.rows(), x.cols());
                let t = if *axis == 0 {
                    Tensor::from_fn(r, c, |_, j| g.data()[j])
                } else {
                    Tensor::from_fn(r, c, |i, _| g.data()[i])
                };
                res.push((*a, t));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.val(*p).rows();
                    if self.needs(*p) {
                        res.push((*p, ops::slice(g, 0, start, rows)?));
                    }
                    start += rows;
                }
            }
            Op::Slice { x, axis, start } => {
                let mut full = Tensor::zeros(self.val(*x).shape());
                ops::scatter_add(&mut full, g, *axis, *start);
                res.push((*x, full));
            }
            Op::RepeatCols(a) => res.push((*a, ops::sum_axis(g, 1)?)),
            Op::CumSum(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut d = g.clone();
                for i in 0..r {
                    let row = d.row_mut(i);
                    for j in (0..c.saturating_sub(1)).rev() {
                        let next = row[j + 1];
                        row[j] += next;
                    }
                }
                res.push((*a, d));
            }
            Op::Reshape(a) => res.push((*a, g.reshape(self.val(*a).shape())?)),
            Op::Gaussian { mu, sigma, phi } => {
                res.extend(self.gaussian_backward(*mu, *sigma, *phi, out, g)?);
            }
            Op::Normalize(a) => {
                let x = self.val(*a);
                let sums = gaussian::column_sums(x)?;
                let (h, n, m) = match *x.shape() {
                    [h, n, m] => (h, n, m),
                    [n, m] => (1, n, m),
                    _ => unreachable!("validated in forward"),
                };
                let floor = T::of(gaussian::NORMALIZE_FLOOR);
                let mut d = vec![T::zero(); x.numel()];
                for k in 0..h {
                    for t in 0..m {
                        let s = sums[k * m + t];
                        if s < floor {
                            continue;
                        }
                        let mut dot = T::zero();
                        for i in 0..n {
                            let idx = (k * n + i) * m + t;
                            dot += g.data()[idx] * out.data()[idx];
                        }
                        for i in 0..n {
                            let idx = (k * n + i) * m + t;
                            d[idx] = (g.data()[idx] - dot) / s;
                        }
                    }
                }
                res.push((*a, Tensor::new(x.shape().to_vec(), d)?));
            }
            Op::WeightNorm { v, g: gain } => {
                let vv = self.val(*v);
                let gv = self.val(*gain);
                let outc = gv.numel();
                let per = vv.numel() / outc;
                let mut dv = vec![T::zero(); vv.numel()];
                let mut dg = vec![T::zero(); outc];
                for o in 0..outc {
                    let vs = &vv.data()[o * per..(o + 1) * per];
                    let gs = &g.data()[o * per..(o + 1) * per];
                    let norm = vs.iter().map(|x| *x * *x).sum::<T>().sqrt();
                    let proj = vs.iter().zip(gs).map(|(a, b)| *a * *b).sum::<T>() / norm;
                    dg[o] = proj;
                    let k = gv.data()[o] / norm;
                    for j in 0..per {
                        dv[o * per + j] = k * (gs[j] - proj * vs[j] / norm);
                    }
                }
                if self.needs(*v) {
                    res.push((*v, Tensor::new(vv.shape().to_vec(), dv)?));
                }
                if self.needs(*gain) {
                    res.push((*gain, Tensor::new(gv.shape().to_vec(), dg)?));
                }
            }
        }
        Ok(res)
    }

    fn conv_backward(&self, x: Var, w: Var, b: Var, dilation: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let xv = self.val(x);
        let wv = self.val(w);
        let (cin, t) = (xv.rows(), xv.cols());
        let (cout, ksize) = (wv.shape()[0], wv.shape()[2]);
        let pad = ops::causal_padding(ksize, dilation);
        let mut res = Vec::new();
        if self.needs(x) {
            let len = t + pad;
            let mut gx = vec![T::zero(); cin * len];
            for o in 0..cout {
                let grow = g.row(o);
                for i in 0..cin {
                    let dst = &mut gx[i * len..(i + 1) * len];
                    for j in 0..ksize {
                        let wgt = wv.data()[(o * cin + i) * ksize + j];
                        let off = pad - j * dilation;
                        for (d, &gvv) in dst[off..off + t].iter_mut().zip(grow) {
                            *d += wgt * gvv;
                        }
                    }
                }
            }
            let gxp = Tensor::new(vec![cin, len], gx)?;
            res.push((x, ops::slice(&gxp, 1, pad, t)?));
        }
        if self.needs(w) {
            let xp = ops::left_pad(xv, pad)?;
            let len = t + pad;
            let mut gw = vec![T::zero(); wv.numel()];
            for o in 0..cout {
                let grow = g.row(o);
                for i in 0..cin {
                    let xrow = &xp.data()[i * len..(i + 1) * len];
                    for j in 0..ksize {
                        let off = pad - j * dilation;
                        gw[(o * cin + i) * ksize + j] =
                            grow.iter().zip(&xrow[off..off + t]).map(|(a, b)| *a * *b).sum();
                    }
                }
            }
            res.push((w, Tensor::new(wv.shape().to_vec(), gw)?));
        }
        if self.needs(b) {
            let bv = self.val(b);
            let gb = (0..cout).map(|o| g.row(o).iter().copied().sum()).collect();
            res.push((b, Tensor::new(bv.shape().to_vec(), gb)?));
        }
        Ok(res)
    }

    fn gaussian_backward(
        &self,
        mu: Var,
        sigma: Var,
        phi: Var,
        out: &Tensor<T>,
        g: &Tensor<T>,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let mv = self.val(mu);
        let sv = self.val(sigma);
        let pv = self.val(phi);
        let m = out.shape()[2];
        let k = mv.numel();
        let (mut dmu, mut dsig, mut dphi) = (vec![T::zero(); k], vec![T::zero(); k], vec![T::zero(); k]);
        for idx in 0..k {
            let (mu_v, s, p) = (mv.data()[idx], sv.data()[idx], pv.data()[idx]);
            let s2 = s * s;
            let (mut a_mu, mut a_s, mut a_p) = (T::zero(), T::zero(), T::zero());
            for t in 0..m {
                let a = out.data()[idx * m + t];
                let gv = g.data()[idx * m + t];
                if a == T::zero() {
                    continue;
                }
                let diff = T::of((t + 1) as f64) - mu_v;
                let ga = gv * a;
                a_mu += ga * diff / s2;
                a_s += ga * diff * diff / (s2 * s);
                a_p += ga / p;
            }
            dmu[idx] = a_mu;
            dsig[idx] = a_s;
            dphi[idx] = a_p;
        }
        let shape = mv.shape().to_vec();
        let mut res = Vec::new();
        if self.needs(mu) {
            res.push((mu, Tensor::new(shape.clone(), dmu)?));
        }
        if self.needs(sigma) {
            res.push((sigma, Tensor::new(shape.clone(), dsig)?));
        }
        if self.needs(phi) {
            res.push((phi, Tensor::new(shape, dphi)?));
        }
        Ok(res)
    }
}

impl<T: Scalar> Ops<T> for Tape<T> {
    type Val = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let key = (store as *const ParamStore<T> as usize, id.0);
        if let Some(v) = self.params.get(&key) {
            return Ok(*v);
        }
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id))?;
        self.params.insert(key, v);
        Ok(v)
    }

    fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(t, false)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::add(self.val(*a), self.val(*b))?;
        self.push(v, Op::Add(*a, *b), &[*a, *b], "add")
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::sub(self.val(*a), self.val(*b))?;
        self.push(v, Op::Sub(*a, *b), &[*a, *b], "sub")
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::mul(self.val(*a), self.val(*b))?;
        self.push(v, Op::Mul(*a, *b), &[*a, *b], "mul")
    }
    fn sq_diff(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::sq_diff(self.val(*a), self.val(*b))?;
        self.push(v, Op::SqDiff(*a, *b), &[*a, *b], "sq_diff")
    }
    fn scale(&mut self, a: &Var, c: T) -> Result<Var> {
        let v = ops::scale(self.val(*a), c);
        self.push(v, Op::Scale(*a, c), &[*a], "scale")
    }
    fn add_scalar(&mut self, a: &Var, c: T) -> Result<Var> {
        let v = ops::add_scalar(self.val(*a), c);
        self.push(v, Op::AddScalar(*a), &[*a], "add_scalar")
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = ops::matmul(self.val(*a), self.val(*b))?;
        self.push(v, Op::MatMul(*a, *b), &[*a, *b], "matmul")
    }
    fn transpose(&mut self, a: &Var) -> Result<Var> {
        let v = ops::transpose(self.val(*a))?;
        self.push(v, Op::Transpose(*a), &[*a], "transpose")
    }
    fn conv1d(&mut self, x: &Var, w: &Var, b: &Var, dilation: usize) -> Result<Var> {
        let v = ops::conv1d_causal(self.val(*x), self.val(*w), self.val(*b), dilation)?;
        self.push(v, Op::Conv { x: *x, w: *w, b: *b, dilation }, &[*x, *w, *b], "conv1d")
    }
    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        let v = ops::sigmoid(self.val(*a));
        self.push(v, Op::Sigmoid(*a), &[*a], "sigmoid")
    }
    fn exp(&mut self, a: &Var) -> Result<Var> {
        let v = ops::exp(self.val(*a));
        self.push(v, Op::Exp(*a), &[*a], "exp")
    }
    fn abs(&mut self, a: &Var) -> Result<Var> {
        let v = ops::abs(self.val(*a));
        self.push(v, Op::Abs(*a), &[*a], "abs")
    }
    fn clamp(&mut self, a: &Var, lo: T, hi: T) -> Result<Var> {
        let v = ops::clamp(self.val(*a), lo, hi);
        self.push(v, Op::Clamp { x: *a, lo, hi }, &[*a], "clamp")
    }
    fn softmax(&mut self, a: &Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let v = ops::softmax(self.val(*a), axis, mask)?;
        self.push(v, Op::Softmax { x: *a, axis }, &[*a], "softmax")
    }
    fn sum_all(&mut self, a: &Var) -> Result<Var> {
        let v = ops::sum_all(self.val(*a));
        self.push(v, Op::SumAll(*a), &[*a], "sum")
    }
    fn sum_axis(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let v = ops::sum_axis(self.val(*a), axis)?;
        self.push(v, Op::SumAxis(*a, axis), &[*a], "sum_axis")
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| self.val(*p)).collect();
        let v = ops::concat_rows(&refs)?;
        self.push(v, Op::Concat(parts.to_vec()), parts, "concat")
    }
    fn slice(&mut self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::slice(self.val(*a), axis, start, len)?;
        self.push(v, Op::Slice { x: *a, axis, start }, &[*a], "slice")
    }
    fn repeat_cols(&mut self, a: &Var, times: usize) -> Result<Var> {
        let v = ops::repeat_cols(self.val(*a), times)?;
        self.push(v, Op::RepeatCols(*a), &[*a], "repeat_cols")
    }
    fn cumsum_cols(&mut self, a: &Var) -> Result<Var> {
        let v = ops::cumsum_cols(self.val(*a))?;
        self.push(v, Op::CumSum(*a), &[*a], "cumsum")
    }
    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let v = self.val(*a).reshape(shape)?;
        self.push(v, Op::Reshape(*a), &[*a], "reshape")
    }
    fn gaussian(&mut self, mu: &Var, sigma: &Var, phi: &Var, m: usize) -> Result<Var> {
        let v = gaussian::gaussian_kernel(self.val(*mu), self.val(*sigma), self.val(*phi), m)?;
        self.push(v, Op::Gaussian { mu: *mu, sigma: *sigma, phi: *phi }, &[*mu, *sigma, *phi], "gaussian attention")
    }
    fn normalize(&mut self, a: &Var) -> Result<Var> {
        let v = gaussian::normalize_attention(self.val(*a))?;
        self.push(v, Op::Normalize(*a), &[*a], "normalize attention")
    }
    fn weight_norm(&mut self, v: &Var, g: &Var) -> Result<Var> {
        let w = kernels::weight_norm(self.val(*v), self.val(*g))?;
        self.push(w, Op::WeightNorm { v: *v, g: *g }, &[*v, *g], "weight_norm")
    }
}

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat entry)` where the maximum occurred.
    pub worst_entry: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of `f` with central differences of step `step`.
///
/// The relative error per entry is `|a − n| / max(1e-8, |a| + |n|)`; the
/// report carries the maximum over every entry of every parameter.
pub fn grad_check<T, F>(params: &[Tensor<T>], step: f64, mut f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.iter().map(|p| tape.leaf(p.clone(), true)).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.value(&loss).ensure_finite("grad_check objective")?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .map(|v| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();

    let mut eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs = perturbed.iter().map(|p| t.leaf(p.clone(), false)).collect::<Result<Vec<_>>>()?;
        let l = f(&mut t, &vs)?;
        let v = t.value(&l).item().to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_entry: None, entries_checked: 0 };
    for p in 0..params.len() {
        for e in 0..params[p].numel() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + T::of(step);
            let plus = eval(&work)?;
            work[p].data_mut()[e] = orig - T::of(step);
            let minus = eval(&work)?;
            work[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].data()[e].to_f64_lossy();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if report.worst_entry.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_entry = Some((p, e));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn check(params: Vec<Tensor<f64>>, f: impl FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>) {
        let r = grad_check(&params, 1e-4, f).unwrap();
        assert!(r.max_relative_error < 1e-3, "relative error {} at {:?}", r.max_relative_error, r.worst_entry);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap(), true).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        // a second backward without reset accumulates
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap(), true).unwrap();
        let c = tape.constant(Tensor::scalar(3.0)).unwrap();
        let zero = tape.scale(&x, 0.0).unwrap();
        let s = tape.sum_all(&zero).unwrap();
        let loss = tape.add(&s, &c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 2]), true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(1, 1, &[800.0]).unwrap(), true).unwrap();
        assert!(matches!(tape.exp(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn square_grad_check_is_tight() {
        let r = grad_check(&[Tensor::scalar(3.0f64)], 1e-4, |t, p| t.mul(&p[0], &p[0])).unwrap();
        assert!(r.max_relative_error < 1e-6);
    }

    #[test]
    fn dead_branch_gets_exact_zero() {
        let params = vec![Tensor::from_f64(1, 2, &[0.3, -0.7]).unwrap(), Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap()];
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(params[0].clone(), true).unwrap();
        let _unused = tape.leaf(params[1].clone(), true).unwrap();
        let s = tape.sum_all(&a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(_unused).unwrap().data(), &[0.0, 0.0]);
        check(params, |t, p| t.sum_all(&p[0]));
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        check(vec![a.clone(), b.clone()], |t, p| {
            let s = t.add(&p[0], &p[1])?;
            let d = t.sub(&s, &p[1])?;
            let m = t.mul(&d, &p[1])?;
            let q = t.sq_diff(&m, &p[0])?;
            let sg = t.sigmoid(&q)?;
            let half = t.scale(&sg, 0.5)?;
            let e = t.exp(&half)?;
            let c = t.clamp(&e, 1.1, 1.5)?;
            let ab = t.abs(&p[0])?;
            let all = t.add(&c, &ab)?;
            let shifted = t.add_scalar(&all, 0.25)?;
            t.mean_all(&shifted)
        });
    }

    #[test]
    fn structural_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = rand_tensor(&mut rng, &[2, 1]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        check(vec![a, b, c, w], |t, p| {
            let ab = t.matmul(&p[0], &p[1])?; // 3x2
            let tr = t.transpose(&ab)?; // 2x3
            let rep = t.repeat_cols(&p[2], 3)?; // 2x3
            let cat = t.concat_rows(&[tr.clone(), rep])?; // 4x3
            let sl = t.slice(&cat, 0, 1, 3)?; // 3x3
            let sm0 = t.softmax(&sl, 0, None)?;
            let sm1 = t.softmax(&sl, 1, Some(&[true, false, true, true, true, false, false, true, true]))?;
            let cs = t.cumsum_cols(&sm1)?;
            let mix = t.mul(&sm0, &cs)?;
            let col = t.sum_axis(&mix, 0)?; // 1x3
            let row = t.mean_axis(&mix, 1)?; // 3x1
            let rr = t.reshape(&row, &[1, 3])?;
            let both = t.mul(&col, &rr)?;
            let wsq = t.mul(&p[3], &p[3])?;
            let wt = t.sum_all(&wsq)?;
            let s = t.sum_all(&both)?;
            t.add(&s, &wt)
        });
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, &[3, 7]);
        let w = rand_tensor(&mut rng, &[4, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        check(vec![x, w, b], |t, p| {
            let y = t.conv1d(&p[0], &p[1], &p[2], 2)?;
            let s = t.sigmoid(&y)?;
            let q = t.mul(&s, &y)?;
            t.sum_all(&q)
        });
    }

    #[test]
    fn gaussian_and_normalisation_gradients() {
        let mu = Tensor::from_f64(1, 3, &[1.3, 2.1, 3.6]).unwrap();
        let sigma = Tensor::from_f64(1, 3, &[0.7, 0.9, 0.8]).unwrap();
        let phi = Tensor::from_f64(1, 3, &[0.85, 0.9, 0.95]).unwrap();
        let wts = Tensor::new(vec![1, 3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        check(vec![mu, sigma, phi], move |t, p| {
            let a = t.gaussian(&p[0], &p[1], &p[2], 4)?;
            let n = t.normalize(&a)?;
            let w = t.constant(wts.clone())?;
            let m = t.mul(&n, &w)?;
            t.sum_all(&m)
        });
    }

    #[test]
    fn weight_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let v = rand_tensor(&mut rng, &[2, 3, 2]);
        let g = rand_tensor(&mut rng, &[2]);
        let probe = rand_tensor(&mut rng, &[2, 3, 2]);
        check(vec![v, g], move |t, p| {
            let w = t.weight_norm(&p[0], &p[1])?;
            let c = t.constant(probe.clone())?;
            let m = t.mul(&w, &c)?;
            t.sum_all(&m)
        });
    }

    #[test]
    fn backward_is_linear_in_the_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let grad_of = |scale_f: f64, scale_g: f64| {
            let mut t = Tape::<f64>::new();
            let v = t.leaf(x.clone(), true).unwrap();
            let f = {
                let s = t.sigmoid(&v).unwrap();
                t.sum_all(&s).unwrap()
            };
            let g = {
                let e = t.sq_diff(&v, &v).unwrap();
                let m = t.mul(&v, &v).unwrap();
                let s = t.add(&e, &m).unwrap();
                t.sum_all(&s).unwrap()
            };
            let fa = t.scale(&f, scale_f).unwrap();
            let gb = t.scale(&g, scale_g).unwrap();
            let l = t.add(&fa, &gb).unwrap();
            t.backward(l).unwrap();
            t.grad(v).unwrap().clone()
        };
        let combined = grad_of(1.5, -0.5);
        let f_only = grad_of(1.0, 0.0);
        let g_only = grad_of(0.0, 1.0);
        for i in 0..combined.numel() {
            let expect = 1.5 * f_only.data()[i] - 0.5 * g_only.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_tape_records_constants_only() {
        let mut t = Tape::<f64>::no_grad();
        let x = t.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = t.mul(&x, &x).unwrap();
        assert!(!t.requires_grad(y));
        t.backward(y).unwrap();
        assert!(t.grad(x).is_none());
    }
}
