//! Pre-norm transformer block shared by the backbone and the side network.
//!
//! `x + Attn(LN(x))`, then `+ MLP(LN(·))` with a GELU MLP. The backbone runs
//! [`block_infer`] (plain kernels, nothing retained); the side network runs
//! [`block_tape`] on a gradient tape. Both compute the same values.

use fpt_numerics::{ops, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::init::Init;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl BlockIds {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        mlp_ratio: usize,
        init: &mut Init,
        learnable: bool,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        let mut add = |name: &str, t: Tensor<T>| store.add(format!("{prefix}.{name}"), t.with_requires_grad(learnable));
        Self {
            ln1_g: add("norm1.weight", Tensor::full([dim], T::one())),
            ln1_b: add("norm1.bias", Tensor::zeros([dim])),
            qkv_w: add("attn.qkv.weight", init.xavier(dim, 3 * dim)),
            qkv_b: add("attn.qkv.bias", Tensor::zeros([3 * dim])),
            proj_w: add("attn.proj.weight", init.xavier(dim, dim)),
            proj_b: add("attn.proj.bias", Tensor::zeros([dim])),
            ln2_g: add("norm2.weight", Tensor::full([dim], T::one())),
            ln2_b: add("norm2.bias", Tensor::zeros([dim])),
            fc1_w: add("mlp.fc1.weight", init.xavier(dim, hidden)),
            fc1_b: add("mlp.fc1.bias", Tensor::zeros([hidden])),
            fc2_w: add("mlp.fc2.weight", init.xavier(hidden, dim)),
            fc2_b: add("mlp.fc2.bias", Tensor::zeros([dim])),
        }
    }

    pub fn all(&self) -> [ParamId; 12] {
        [
            self.ln1_g, self.ln1_b, self.qkv_w, self.qkv_b, self.proj_w, self.proj_b, self.ln2_g, self.ln2_b,
            self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b,
        ]
    }
}

/// Everything one block exposes for reuse downstream.
#[derive(Clone, Debug)]
pub struct BlockOutput<T> {
    /// `[B, N, d]`
    pub out: Tensor<T>,
    /// `[B, h, N, N]`
    pub attn: Tensor<T>,
    /// Post-projection per-head keys, `[B, h, N, d/h]`.
    pub keys: Tensor<T>,
    /// Post-projection per-head values, `[B, h, N, d/h]`.
    pub values: Tensor<T>,
}

fn split_heads<T: Real>(qkv: &Tensor<T>, heads: usize) -> Result<[Tensor<T>; 3]> {
    let (b, n, three_d) = (qkv.shape()[0], qkv.shape()[1], qkv.shape()[2]);
    let dh = three_d / 3 / heads;
    let r = qkv.clone().reshape([b, n, 3, heads, dh])?;
    let p = ops::permute(&r, &[2, 0, 3, 1, 4])?;
    let part = |i| -> Result<Tensor<T>> { Ok(ops::narrow(&p, 0, i, 1)?.reshape([b, heads, n, dh])?) };
    Ok([part(0)?, part(1)?, part(2)?])
}

/// Gradient-free block forward.
pub fn block_infer<T: Real>(store: &ParamStore<T>, ids: &BlockIds, x: &Tensor<T>, heads: usize) -> Result<BlockOutput<T>> {
    let v = |id| store.value(id);
    let eps = T::lit(LN_EPS);
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = ops::layer_norm(x, v(ids.ln1_g), v(ids.ln1_b), eps)?;
    let qkv = ops::linear(&h, v(ids.qkv_w), Some(v(ids.qkv_b)))?;
    let [q, k, vv] = split_heads(&qkv, heads)?;
    let (att, map) = ops::scaled_dot_attention(&q, &k, &vv)?;
    let merged = ops::permute(&att, &[0, 2, 1, 3])?.reshape([b, n, d])?;
    let x1 = ops::add(x, &ops::linear(&merged, v(ids.proj_w), Some(v(ids.proj_b)))?)?;
    let h2 = ops::layer_norm(&x1, v(ids.ln2_g), v(ids.ln2_b), eps)?;
    let m = ops::gelu(&ops::linear(&h2, v(ids.fc1_w), Some(v(ids.fc1_b)))?);
    let m = ops::linear(&m, v(ids.fc2_w), Some(v(ids.fc2_b)))?;
    Ok(BlockOutput {
        out: ops::add(&x1, &m)?,
        attn: map,
        keys: k,
        values: vv,
    })
}

/// Inverted dropout with a seeded mask stream.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let p = self.p;
        let rng = &mut *self.rng;
        let mask = Tensor::from_fn(tape.shape(x), |_| if rng.gen::<f64>() < p { T::zero() } else { keep });
        let m = tape.constant(mask);
        Ok(tape.mul(x, m)?)
    }
}

/// Block forward on a tape; returns (output, attention map).
pub fn block_tape<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    ids: &BlockIds,
    x: Var,
    heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<(Var, Var)> {
    let eps = T::lit(LN_EPS);
    let shape = tape.shape(x).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let mut p = |id| tape.param(store, id);
    let [g1, b1, wqkv, bqkv, wp, bp, g2, b2, w1, bb1, w2, bb2] = ids.all().map(&mut p);

    let h = tape.layer_norm(x, g1, b1, eps)?;
    let qkv = tape.linear(h, wqkv, Some(bqkv))?;
    let r = tape.reshape(qkv, &[b, n, 3, heads, dh])?;
    let r = tape.permute(r, &[2, 0, 3, 1, 4])?;
    let mut part = |i| -> Result<Var> {
        let s = tape.narrow(r, 0, i, 1)?;
        Ok(tape.reshape(s, &[b, heads, n, dh])?)
    };
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let (att, map) = tape.attention(q, k, v)?;
    let merged = tape.permute(att, &[0, 2, 1, 3])?;
    let merged = tape.reshape(merged, &[b, n, d])?;
    let mut proj = tape.linear(merged, wp, Some(bp))?;
    if let Some(dr) = dropout.as_deref_mut() {
        proj = dr.apply(tape, proj)?;
    }
    let x1 = tape.add(x, proj)?;
    let h2 = tape.layer_norm(x1, g2, b2, eps)?;
    let m = tape.linear(h2, w1, Some(bb1))?;
    let m = tape.gelu(m);
    let mut m = tape.linear(m, w2, Some(bb2))?;
    if let Some(dr) = dropout.as_deref_mut() {
        m = dr.apply(tape, m)?;
    }
    Ok((tape.add(x1, m)?, map))
}
