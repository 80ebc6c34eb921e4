//! Layers built from graph primitives: affine maps, layer norm, and the
//! pre-norm transformer block shared by every encoder and interaction level.

use rand::Rng;

use super::graph::Var;
use super::params::{Bound, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: d_in × d_out`.
pub fn linear<'g>(x: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
    if x.cols() != weight.rows() || weight.cols() != bias.cols() {
        return Err(Error::dim("linear", &x.shape(), &weight.shape()));
    }
    x.matmul(weight)?.add_row(bias)
}

/// `softmax(q kᵀ · scale) v`, one head.
pub fn scaled_dot_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, scale: f64) -> Result<Var<'g>> {
    let weights = q.matmul(k.t())?.scale(scale).softmax()?;
    weights.matmul(v)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    /// Gaussian weights with std `1/sqrt(d_in)`, zero bias.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        frozen: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / (d_in.max(1) as f64).sqrt();
        let w = Tensor::randn(&[d_in, d_out], std, rng);
        Self::register_with(store, prefix, w, Tensor::zeros(&[d_out]), frozen)
    }

    pub fn register_with(
        store: &mut ParamStore,
        prefix: &str,
        weight: Tensor,
        bias: Tensor,
        frozen: bool,
    ) -> Result<Self> {
        let (d_in, d_out) = (weight.rows(), weight.cols());
        if bias.len() != d_out {
            return Err(Error::dim("linear", weight.shape(), bias.shape()));
        }
        Ok(Linear {
            weight: store.add(format!("{prefix}/weight"), weight, frozen)?,
            bias: store.add(format!("{prefix}/bias"), bias, frozen)?,
            d_in,
            d_out,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        linear(x, p[self.weight], p[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize, frozen: bool) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{prefix}/gamma"), Tensor::full(&[width], 1.0), frozen)?,
            beta: store.add(format!("{prefix}/beta"), Tensor::zeros(&[width]), frozen)?,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(p[self.gamma], p[self.beta], LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub width: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl BlockShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "token width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, f) = (self.width, self.hidden);
        4 * d + 4 * Linear::param_count(d, d) + Linear::param_count(d, f) + Linear::param_count(f, d)
    }
}

/// Pre-norm transformer block: `X + MHSA(LN(X))`, then `+ FFN(LN(·))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub shape: BlockShape,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    /// With `zero_out`, the attention output and second FFN projections
    /// start at zero so the block is the identity map.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        shape: BlockShape,
        frozen: bool,
        zero_out: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        shape.validate()?;
        let BlockShape { width: d, hidden: f, .. } = shape;
        let ln1 = LayerNorm::register(store, &format!("{prefix}/ln1"), d, frozen)?;
        let q = Linear::register(store, &format!("{prefix}/attn/q"), d, d, frozen, rng)?;
        let k = Linear::register(store, &format!("{prefix}/attn/k"), d, d, frozen, rng)?;
        let v = Linear::register(store, &format!("{prefix}/attn/v"), d, d, frozen, rng)?;
        let o = if zero_out {
            Linear::register_with(store, &format!("{prefix}/attn/o"), Tensor::zeros(&[d, d]), Tensor::zeros(&[d]), frozen)?
        } else {
            Linear::register(store, &format!("{prefix}/attn/o"), d, d, frozen, rng)?
        };
        let ln2 = LayerNorm::register(store, &format!("{prefix}/ln2"), d, frozen)?;
        let ff1 = Linear::register(store, &format!("{prefix}/ffn/fc1"), d, f, frozen, rng)?;
        let ff2 = if zero_out {
            Linear::register_with(store, &format!("{prefix}/ffn/fc2"), Tensor::zeros(&[f, d]), Tensor::zeros(&[d]), frozen)?
        } else {
            Linear::register(store, &format!("{prefix}/ffn/fc2"), f, d, frozen, rng)?
        };
        Ok(TransformerBlock {
            shape,
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            ff1,
            ff2,
        })
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        if x.cols() != self.shape.width {
            return Err(Error::dim("mhsa_block", &x.shape(), &[self.shape.width]));
        }
        let h = self.ln1.forward(p, x)?;
        let (q, k, v) = (self.q.forward(p, h)?, self.k.forward(p, h)?, self.v.forward(p, h)?);
        let heads = self.shape.heads;
        let dh = self.shape.width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let (a, b) = (i * dh, (i + 1) * dh);
            outs.push(scaled_dot_attention(
                q.slice_cols(a, b)?,
                k.slice_cols(a, b)?,
                v.slice_cols(a, b)?,
                scale,
            )?);
        }
        let attn = if heads == 1 { outs[0] } else { x.graph().concat_cols(&outs)? };
        let x1 = x.add(self.o.forward(p, attn)?)?;
        let h2 = self.ln2.forward(p, x1)?;
        let ff = self.ff2.forward(p, self.ff1.forward(p, h2)?.gelu())?;
        x1.add(ff)
    }
}
