//! Forward kernels shared by the tape and by gradient-free inference.
//!
//! Every reduction runs in a fixed sequential order per output element, so
//! results are bitwise independent of the rayon thread count.

use rayon::prelude::*;

use crate::error::{shape_err, NumericsError, Result};
use crate::tensor::{strides, Real, Tensor};

/// Rows-times-inner-dim threshold below which matmul stays single threaded.
const PAR_WORK: usize = 1 << 14;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov = *ov + av * bv;
            }
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PAR_WORK {
        out[..m * n].par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out[..m * n].chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, ov) in o.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc = acc + x * y;
            }
            *ov = *ov + acc;
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PAR_WORK {
        out[..m * n].par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out[..m * n].chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`, summed over `batches` consecutive
/// `(a, b)` blocks in order.
pub(crate) fn gemm_tn_batched<T: Real>(
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
) {
    let row = |(i, o): (usize, &mut [T])| {
        for bi in 0..batches {
            let ab = &a[bi * k * m..(bi + 1) * k * m];
            let bb = &b[bi * k * n..(bi + 1) * k * n];
            for p in 0..k {
                let av = ab[p * m + i];
                if av == T::zero() {
                    continue;
                }
                let br = &bb[p * n..(p + 1) * n];
                for (ov, &bv) in o.iter_mut().zip(br) {
                    *ov = *ov + av * bv;
                }
            }
        }
    };
    if n == 0 {
        return;
    }
    if batches * m * k * n >= PAR_WORK {
        out[..m * n].par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out[..m * n].chunks_mut(n).enumerate().for_each(row);
    }
}

/// Shapes of a batched matmul: (batch count, m, k, n, b is shared).
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err(format!("matmul needs rank >= 2, got {a:?} and {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return shape_err(format!(
            "matmul inner dims differ: {a:?} x {b:?} (trans_b = {trans_b})"
        ));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    let shared = b.len() == 2;
    if !shared && b[..b.len() - 2] != a[..a.len() - 2] {
        return shape_err(format!("matmul batch dims differ: {a:?} x {b:?}"));
    }
    Ok((batch, m, k, n, shared))
}

/// Batched matrix product. `b` is either rank 2 (shared across the batch) or
/// has the same leading dims as `a`. With `trans_b`, `b` holds `[.., n, k]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    if shared {
        // One big GEMM: the batch folds into the row dimension.
        if trans_b {
            gemm_nt(batch * m, k, n, a.data(), b.data(), &mut out);
        } else {
            gemm_nn(batch * m, k, n, a.data(), b.data(), &mut out);
        }
    } else {
        let run = |(bi, o): (usize, &mut [T])| {
            let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
            let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
            if trans_b {
                gemm_nt(m, k, n, ab, bb, o);
            } else {
                gemm_nn(m, k, n, ab, bb, o);
            }
        };
        if m * n > 0 {
            if batch * m * k * n >= PAR_WORK {
                out.par_chunks_mut(m * n).enumerate().for_each(run);
            } else {
                out.chunks_mut(m * n).enumerate().for_each(run);
            }
        }
    }
    Tensor::new(shape, out)
}

/// `x · w + b` over the last axis, with `w: [in, out]` and `b: [out]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let y = matmul(x, w, false)?;
    match b {
        Some(b) => add_broadcast(&y, b),
        None => Ok(y),
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data)
}

pub fn scale<T: Real>(a: &Tensor<T>, c: T) -> Tensor<T> {
    Tensor::new(a.shape(), a.data().iter().map(|&x| x * c).collect()).expect("same shape")
}

/// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positional tables).
pub fn add_broadcast<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.rank() > a.rank() || a.shape()[a.rank() - b.rank()..] != *b.shape() {
        return shape_err(format!(
            "cannot broadcast {:?} onto {:?}",
            b.shape(),
            a.shape()
        ));
    }
    let w = b.numel();
    let mut data = a.data().to_vec();
    if w > 0 {
        for chunk in data.chunks_mut(w) {
            for (x, &y) in chunk.iter_mut().zip(b.data()) {
                *x = *x + y;
            }
        }
    }
    Tensor::new(a.shape(), data)
}

/// (outer, axis extent, inner) decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return shape_err(format!("softmax axis {axis} out of range for {:?}", x.shape()));
    }
    if !x.all_finite() {
        return Err(NumericsError::InvalidValue(
            "softmax input contains NaN or infinity".into(),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    if inner == 1 {
        let rows = |(r, o): (usize, &mut [T])| softmax_row(&src[r * len..(r + 1) * len], o);
        if len > 0 {
            if outer * len >= PAR_WORK {
                out.par_chunks_mut(len).enumerate().for_each(rows);
            } else {
                out.chunks_mut(len).enumerate().for_each(rows);
            }
        }
    } else {
        let mut buf = vec![T::zero(); len];
        let mut obuf = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..len {
                    buf[a] = src[(o * len + a) * inner + i];
                }
                softmax_row(&buf, &mut obuf);
                for a in 0..len {
                    out[(o * len + a) * inner + i] = obuf[a];
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Layer-norm statistics over the last axis: normalized values and 1/std per row.
pub(crate) fn layer_norm_stats<T: Real>(x: &Tensor<T>, eps: T) -> Result<(Vec<T>, Vec<T>)> {
    let d = *x.shape().last().ok_or_else(|| NumericsError::Shape("layer_norm on a scalar".into()))?;
    if d < 2 {
        return shape_err(format!("layer_norm needs last extent >= 2, got {:?}", x.shape()));
    }
    let rows = x.numel() / d;
    let dn = T::lit(d as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(xr) {
            *o = (v - mean) * rs;
        }
    }
    Ok((xhat, rstd))
}

/// Normalizes over the last axis, then applies `gain` and `bias` (both `[d]`).
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap_or(&0);
    if gain.shape() != [d] || bias.shape() != [d] {
        return shape_err(format!(
            "layer_norm affine shapes {:?}/{:?} for input {:?}",
            gain.shape(),
            bias.shape(),
            x.shape()
        ));
    }
    let (xhat, _) = layer_norm_stats(x, eps)?;
    Ok(apply_affine(x.shape(), xhat, gain.data(), bias.data()))
}

pub(crate) fn apply_affine<T: Real>(shape: &[usize], mut xhat: Vec<T>, g: &[T], b: &[T]) -> Tensor<T> {
    let d = g.len();
    for row in xhat.chunks_mut(d) {
        for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
            *v = *v * gv + bv;
        }
    }
    Tensor::new(shape, xhat).expect("same shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return shape_err(format!("bad permutation {axes:?} for rank {r}"));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x.data()[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += mapped[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= mapped[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return shape_err(format!("concat axis {axis} out of range for {:?}", first.shape()));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let mut s = p.shape().to_vec();
        if s.len() != shape.len() {
            return shape_err("concat rank mismatch");
        }
        shape[axis] += s[axis];
        s[axis] = 0;
        let mut expect = shape.clone();
        expect[axis] = 0;
        if s != expect {
            return shape_err(format!("concat extents differ: {:?} vs {:?}", p.shape(), first.shape()));
        }
    }
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    Tensor::new(shape, out)
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(NumericsError::Index(format!(
            "narrow({axis}, {start}, {len}) out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, ext, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, out)
}

/// Gathers entries `indices` along `axis`, in the given order.
pub fn index_select<T: Real>(x: &Tensor<T>, axis: usize, indices: &[usize]) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return shape_err(format!("index_select axis {axis} out of range"));
    }
    let (outer, ext, inner) = axis_split(x.shape(), axis);
    if let Some(&bad) = indices.iter().find(|&&i| i >= ext) {
        return Err(NumericsError::Index(format!("index {bad} out of range for extent {ext}")));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let base = (o * ext + i) * inner;
            out.extend_from_slice(&x.data()[base..base + inner]);
        }
    }
    Tensor::new(shape, out)
}

/// Mean cross-entropy of `logits: [B, C]` against integer labels.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_probs(logits, labels)?.0)
}

pub(crate) fn cross_entropy_with_probs<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return shape_err(format!(
            "cross_entropy: logits {:?} with {} labels",
            logits.shape(),
            labels.len()
        ));
    }
    let c = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NumericsError::Index(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits, 1)?;
    let b = labels.len();
    if b == 0 {
        return Ok((T::zero(), probs));
    }
    let mut total = T::zero();
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        total = total + (lse - row[l]);
    }
    Ok((total / T::lit(b as f64), probs))
}

/// Attention output and probability map for `q: [B, h, n_q, d]`,
/// `k, v: [B, h, n_k, d]`; logits are scaled by `1 / sqrt(d)`.
pub fn scaled_dot_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_attention_shapes(q.shape(), k.shape(), v.shape())?;
    let d = q.shape()[3];
    let logits = scale(&matmul(q, k, true)?, T::one() / T::lit(d as f64).sqrt());
    let map = softmax(&logits, 3)?;
    let out = matmul(&map, v, false)?;
    Ok((out, map))
}

pub(crate) fn check_attention_shapes(q: &[usize], k: &[usize], v: &[usize]) -> Result<()> {
    if q.len() != 4 || k.len() != 4 || v.len() != 4 {
        return shape_err(format!("attention expects rank-4 inputs, got {q:?} {k:?} {v:?}"));
    }
    if q[0] != k[0] || q[0] != v[0] || q[1] != k[1] || q[1] != v[1] {
        return shape_err(format!("attention batch/head dims differ: {q:?} {k:?} {v:?}"));
    }
    if q[3] != k[3] || k[2] != v[2] {
        return shape_err(format!("attention key/value dims differ: {q:?} {k:?} {v:?}"));
    }
    if q[3] == 0 {
        return shape_err("attention head dim must be positive");
    }
    Ok(())
}
