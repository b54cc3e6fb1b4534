//! Parameterised building blocks: linear and conv layers, layer norm and a
//! pre-norm transformer encoder/decoder with optional head tying.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), &[d_in, d_out], d_in, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), &[d_out], d_in, rng)?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    /// Applies to the last axis of `x[..., d_in]`.
    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let last = *shape.last().unwrap_or(&0);
        if last != self.d_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.d_in])?;
        let y = g.matmul(flat, g.param(self.w))?;
        let y = g.add_bias(y, g.param(self.b))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(&[d]))?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.layernorm(x, g.param(self.gain), g.param(self.bias), LAYERNORM_EPS)
    }
}

/// Same-padded 2-D convolution layer over `[C,N,M]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let w = store.add_uniform(&format!("{name}.w"), &[c_out, c_in, kernel, kernel], fan_in, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), &[c_out], fan_in, rng)?;
        Ok(Self {
            w,
            b,
            c_in,
            c_out,
            kernel,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel * kernel + c_out
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.conv2d(x, g.param(self.w), g.param(self.b))
    }
}

/// Scaled dot-product attention on batched heads.
///
/// `q[B,Lq,dh]`, `k[B,Lk,dh]`, `v[B,Lk,dv]`; softmax runs over the key axis,
/// so every query row of the returned weights `[B,Lq,Lk]` sums to one.
pub fn scaled_dot_attention(g: &Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = *g.shape(q).last().unwrap_or(&1);
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores, 2)?;
    let out = g.bmm(weights, v, false)?;
    Ok((out, weights))
}

/// Multi-head attention.
///
/// With `tied`, all heads share one query, one key and one value projection
/// of width `d / heads`; head outputs are identical and concatenated before
/// the output projection. Untied heads each own a `d / heads` slice of full
/// `d x d` projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub tied: bool,
    pub d_model: usize,
}

/// Output of an attention call. `weights` is `[B,Lq,Lk]` for tied heads and
/// `[B*heads,Lq,Lk]` otherwise.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Var,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        tied: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by heads {heads}"
            )));
        }
        let proj = if tied { d_model / heads } else { d_model };
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, proj, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, proj, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, proj, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng)?,
            heads,
            tied,
            d_model,
        })
    }

    pub fn param_count(d_model: usize, heads: usize, tied: bool) -> usize {
        let proj = if tied { d_model / heads } else { d_model };
        3 * Linear::param_count(d_model, proj) + Linear::param_count(d_model, d_model)
    }

    /// `query[B,Lq,d]` attends to `context[B,Lk,d]`.
    pub fn forward(&self, g: &Graph, query: Var, context: Var) -> Result<AttentionOutput> {
        let qs = g.shape(query);
        let ks = g.shape(context);
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d_model || ks[2] != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let (b, lq, lk, h) = (qs[0], qs[1], ks[1], self.heads);
        let dh = self.d_model / h;
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        if self.tied {
            let (head, weights) = scaled_dot_attention(g, q, k, v)?;
            let copies = vec![head; h];
            let cat = g.concat(&copies, 2)?;
            let out = self.o.forward(g, cat)?;
            return Ok(AttentionOutput { out, weights });
        }
        let split = |x: Var, l: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, l, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * h, l, dh])
        };
        let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
        let (heads, weights) = scaled_dot_attention(g, qh, kh, vh)?;
        let merged = g.reshape(heads, &[b, h, lq, dh])?;
        let merged = g.permute(merged, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, &[b, lq, self.d_model])?;
        let out = self.o.forward(g, merged)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Per-query attention weights averaged over heads, `[B,Lq,Lk]`.
pub fn head_averaged_weights(g: &Graph, att: &AttentionOutput, batch: usize) -> Tensor {
    let w = g.value(att.weights);
    let (bh, lq, lk) = (w.shape[0], w.shape[1], w.shape[2]);
    let heads = bh / batch.max(1);
    if heads <= 1 {
        return w;
    }
    let mut out = Tensor::zeros(&[batch, lq, lk]);
    for bi in 0..batch {
        for hi in 0..heads {
            let src = &w.data[(bi * heads + hi) * lq * lk..(bi * heads + hi + 1) * lq * lk];
            for (o, s) in out.data[bi * lq * lk..(bi + 1) * lq * lk].iter_mut().zip(src) {
                *o += s / heads as f64;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, &format!("{name}.l1"), d, d_ff, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), d_ff, d, rng)?,
        })
    }

    pub fn param_count(d: usize, d_ff: usize) -> usize {
        Linear::param_count(d, d_ff) + Linear::param_count(d_ff, d)
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let h = g.gelu(self.l1.forward(g, x)?);
        self.l2.forward(g, h)
    }
}

/// Pre-norm encoder layer: `x + SA(LN x)`, then `x + FF(LN x)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        tied: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, tied, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, d_ff, rng)?,
        })
    }

    pub fn param_count(d: usize, d_ff: usize, heads: usize, tied: bool) -> usize {
        4 * d + MultiHeadAttention::param_count(d, heads, tied) + FeedForward::param_count(d, d_ff)
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h)?;
        let x = g.add(x, a.out)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        g.add(x, f)
    }
}

/// Pre-norm decoder layer with self-attention, cross-attention and FF.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        tied: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, tied, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, tied, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, d_ff, rng)?,
        })
    }

    pub fn param_count(d: usize, d_ff: usize, heads: usize, tied: bool) -> usize {
        6 * d + 2 * MultiHeadAttention::param_count(d, heads, tied) + FeedForward::param_count(d, d_ff)
    }

    /// Returns the updated queries and the cross-attention output.
    pub fn forward(&self, g: &Graph, x: Var, memory: Var) -> Result<(Var, AttentionOutput)> {
        let h = self.ln1.forward(g, x)?;
        let sa = self.self_attn.forward(g, h, h)?;
        let x = g.add(x, sa.out)?;
        let h = self.ln2.forward(g, x)?;
        let ca = self.cross_attn.forward(g, h, memory)?;
        let x = g.add(x, ca.out)?;
        let h = self.ln3.forward(g, x)?;
        let f = self.ff.forward(g, h)?;
        Ok((g.add(x, f)?, ca))
    }
}
