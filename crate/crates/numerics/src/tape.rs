//! Reverse-mode differentiation by recording ops on a linear tape.
//!
//! Values are computed eagerly with the kernels in [`crate::ops`]. Only nodes
//! that depend on a parameter with `requires_grad` take part in the backward
//! sweep, and only those parameters appear in the returned [`Gradients`].

use crate::error::{shape_err, NumericsError, Result};
use crate::ops::{self, gemm_nn, gemm_nt, gemm_tn_batched};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    BroadcastBatch { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    SumAll { a: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients will flow back through `v`.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.with_requires_grad(false), Op::Constant, false)
    }

    /// Binds a stored parameter. It takes part in differentiation only if its
    /// tensor has `requires_grad` set.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let ng = value.requires_grad();
        self.push(value, Op::Param(id), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b), trans_b)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul { a, b, trans_b }, ng))
    }

    /// `x · w (+ b)` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    /// `a + b` with `b`'s shape a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add_broadcast(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::AddBroadcast { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = ops::scale(self.value(a), c);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale { a, c }, ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(a), axis)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Softmax { a, axis }, ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(format!(
                "layer_norm affine shapes {:?}/{:?} for input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            ));
        }
        let (xhat, rstd) = ops::layer_norm_stats(self.value(x), eps)?;
        let out = ops::apply_affine(
            self.value(x).shape(),
            xhat.clone(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = ops::gelu(self.value(a));
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu { a }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape { a }, ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = ops::permute(self.value(a), axes)?;
        let ng = self.ng(&[a]);
        Ok(self.push(
            v,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&vals, axis)?;
        let ng = self.ng(parts);
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::narrow(self.value(a), axis, start, len)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Narrow { a, axis, start }, ng))
    }

    /// Repeats `a` `n` times along a new leading axis.
    pub fn broadcast_batch(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut data = Vec::with_capacity(n * src.numel());
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let v = Tensor::new(shape, data).expect("consistent shape");
        let ng = self.ng(&[a]);
        self.push(v, Op::BroadcastBatch { a }, ng)
    }

    /// Mean cross-entropy of `[B, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_with_probs(self.value(logits), labels)?;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng)
    }

    /// Multi-head attention on the tape; returns (output, probability map).
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        ops::check_attention_shapes(self.shape(q), self.shape(k), self.shape(v))?;
        let d = self.shape(q)[3];
        let logits = self.matmul(q, k, true)?;
        let logits = self.scale(logits, T::one() / T::lit(d as f64).sqrt());
        let map = self.softmax(logits, 3)?;
        let out = self.matmul(map, v, false)?;
        Ok((out, map))
    }

    /// Gradients of the scalar `loss` with respect to every bound parameter
    /// that has `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    match out.map.get_mut(id) {
                        Some(acc) => {
                            for (x, y) in acc.data_mut().iter_mut().zip(t.data()) {
                                *x = *x + *y;
                            }
                        }
                        None => {
                            out.map.insert(*id, t);
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (batch, m, k, n, shared) = ops::matmul_dims(av.shape(), bv.shape(), *trans_b)?;
                    if self.needs_grad(*a) {
                        let mut da = vec![T::zero(); av.numel()];
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = if shared { bv.data() } else { &bv.data()[bi * k * n..(bi + 1) * k * n] };
                            let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                            if *trans_b {
                                gemm_nn(m, n, k, gb, bb, dab);
                            } else {
                                gemm_nt(m, n, k, gb, bb, dab);
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs_grad(*b) {
                        let mut db = vec![T::zero(); bv.numel()];
                        if shared {
                            if *trans_b {
                                gemm_tn_batched(1, n, batch * m, k, &g, av.data(), &mut db);
                            } else {
                                gemm_tn_batched(1, k, batch * m, n, av.data(), &g, &mut db);
                            }
                        } else {
                            for bi in 0..batch {
                                let gb = &g[bi * m * n..(bi + 1) * m * n];
                                let ab = &av.data()[bi * m * k..(bi + 1) * m * k];
                                let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                                if *trans_b {
                                    gemm_tn_batched(1, n, m, k, gb, ab, dbb);
                                } else {
                                    gemm_tn_batched(1, k, m, n, ab, gb, dbb);
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddBroadcast { a, b } => {
                    if self.needs_grad(*b) {
                        let w = self.value(*b).numel();
                        let mut db = vec![T::zero(); w];
                        if w > 0 {
                            for chunk in g.chunks(w) {
                                for (d, &x) in db.iter_mut().zip(chunk) {
                                    *d = *d + x;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.needs_grad(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs_grad(*a) {
                        let d = g.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, *a, d);
                    }
                    if self.needs_grad(*b) {
                        let d = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale { a, c } => {
                    let d = g.iter().map(|&x| x * *c).collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Softmax { a, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = ops::axis_split(y.shape(), *axis);
                    let mut d = vec![T::zero(); y.numel()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y.data()[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = y.data()[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    let dim = gv.len();
                    let rows = rstd.len();
                    if self.needs_grad(*gain) || self.needs_grad(*bias) {
                        let mut dg = vec![T::zero(); dim];
                        let mut db = vec![T::zero(); dim];
                        for r in 0..rows {
                            for j in 0..dim {
                                let gi = g[r * dim + j];
                                dg[j] = dg[j] + gi * xhat[r * dim + j];
                                db[j] = db[j] + gi;
                            }
                        }
                        if self.needs_grad(*gain) {
                            accumulate(&mut grads, *gain, dg);
                        }
                        if self.needs_grad(*bias) {
                            accumulate(&mut grads, *bias, db);
                        }
                    }
                    if self.needs_grad(*x) {
                        let dn = T::lit(dim as f64);
                        let mut dx = vec![T::zero(); rows * dim];
                        for r in 0..rows {
                            let xh = &xhat[r * dim..(r + 1) * dim];
                            let dxh: Vec<T> = (0..dim).map(|j| g[r * dim + j] * gv[j]).collect();
                            let mean_d: T = dxh.iter().copied().sum::<T>() / dn;
                            let mean_dx: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                            for j in 0..dim {
                                dx[r * dim + j] = rstd[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Gelu { a } => {
                    let d = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gi, &x)| gi * ops::gelu_grad(x))
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape { a } => accumulate(&mut grads, *a, g),
                Op::Permute { a, axes } => {
                    let gt = Tensor::new(node.value.shape(), g)?;
                    let back = ops::permute(&gt, &ops::inverse_permutation(axes))?;
                    accumulate(&mut grads, *a, back.into_data());
                }
                Op::Concat { parts, axis } => {
                    let gt = Tensor::new(node.value.shape(), g)?;
                    let mut start = 0;
                    for p in parts {
                        let len = self.shape(*p)[*axis];
                        if self.needs_grad(*p) {
                            let piece = ops::narrow(&gt, *axis, start, len)?;
                            accumulate(&mut grads, *p, piece.into_data());
                        }
                        start += len;
                    }
                }
                Op::Narrow { a, axis, start } => {
                    let src_shape = self.shape(*a);
                    let (outer, ext, inner) = ops::axis_split(src_shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut d = vec![T::zero(); outer * ext * inner];
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::BroadcastBatch { a } => {
                    let w = self.value(*a).numel();
                    let mut d = vec![T::zero(); w];
                    if w > 0 {
                        for chunk in g.chunks(w) {
                            for (x, &y) in d.iter_mut().zip(chunk) {
                                *x = *x + y;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let b = labels.len();
                    let c = if b == 0 { 0 } else { probs.numel() / b };
                    let scale = if b == 0 { T::zero() } else { g[0] / T::lit(b as f64) };
                    let mut d: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * c + l] = d[r * c + l] - scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::SumAll { a } => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
            }
        }
        for (id, t) in &out.map {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::InvalidValue(format!(
                    "non-finite gradient for parameter {}",
                    id.0
                )));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (x, y) in acc.iter_mut().zip(d) {
                *x = *x + y;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_fn([2, 2], |i| i as f64).with_requires_grad(true));
        let f = store.add("frozen", Tensor::from_fn([2, 2], |i| 1.0 + i as f64));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([3, 2], |i| i as f64 * 0.5));
        let wv = tape.param(&store, w);
        let fv = tape.param(&store, f);
        let h = tape.matmul(x, fv, false).unwrap();
        let y = tape.matmul(h, wv, false).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_some());
        assert!(grads.get(f).is_none());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new([1], vec![3.0]).unwrap().with_requires_grad(true));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }
}
