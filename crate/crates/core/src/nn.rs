//! Parameterized layers shared by the backbones, fusion blocks and head.
//!
//! Layers only hold [`ParamId`]s, so one model description works with any
//! scalar type; the values live in a [`ParamStore`].

use crate::autograd::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Real;

/// Registers parameters under dotted names with a shared init stream.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: SplitMix64,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: SplitMix64::new(seed),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.store.init(name, shape, init, &mut self.rng)
    }
}

/// `x·W + b` over the last axis, with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.param(
            &format!("{name}.weight"),
            &[in_dim, out_dim],
            Init::ScaledNormal { fan_in: in_dim },
        )?;
        let bias = if bias {
            Some(b.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Parameters that must be zeroed to make this layer output exactly zero.
    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: b.param(&format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: b.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention from a query sequence onto a
/// key/value sequence. Keys carry no bias: a key bias only shifts each
/// softmax row by a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(b, &format!("{name}.query"), dim, dim, true)?,
            key: Linear::new(b, &format!("{name}.key"), dim, dim, false)?,
            value: Linear::new(b, &format!("{name}.value"), dim, dim, true)?,
            output: Linear::new(b, &format!("{name}.output"), dim, dim, true)?,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim
    }

    /// `q: [B, Nq, D]`, `kv: [B, Nkv, D]` → `[B, Nq, D]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        kv: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let d = self.dim();
        let (sq, skv) = (g.shape(q).to_vec(), g.shape(kv).to_vec());
        if sq.len() != 3 || skv.len() != 3 || sq[2] != d || skv[2] != d || sq[0] != skv[0] {
            return Err(Error::dim(
                "cross_attention",
                format!("queries {sq:?} and keys {skv:?} for width {d}"),
            ));
        }
        if let Some(m) = mask {
            if m.cols() != skv[1] || m.batch() != skv[0] {
                return Err(Error::dim(
                    "cross_attention",
                    format!("mask covers {} keys x {} items, keys are {skv:?}", m.cols(), m.batch()),
                ));
            }
        }
        let (batch, nq, nkv) = (sq[0], sq[1], skv[1]);
        let (h, dh) = (self.heads, d / self.heads);

        let qp = self.query.forward(g, q)?;
        let qp = g.reshape(qp, &[batch, nq, h, dh])?;
        let qp = g.permute(qp, &[0, 2, 1, 3])?;
        let kp = self.key.forward(g, kv)?;
        let kp = g.reshape(kp, &[batch, nkv, h, dh])?;
        let kt = g.permute(kp, &[0, 2, 3, 1])?;
        let vp = self.value.forward(g, kv)?;
        let vp = g.reshape(vp, &[batch, nkv, h, dh])?;
        let vp = g.permute(vp, &[0, 2, 1, 3])?;

        let scores = g.matmul(qp, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = match mask {
            Some(m) => g.softmax_masked(scores, m)?,
            None => g.softmax_last(scores)?,
        };
        let ctx = g.matmul(weights, vp)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, nq, d])?;
        self.output.forward(g, ctx)
    }
}

/// Two affine maps with a GELU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer layer: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), dim)?,
            attn: Attention::new(b, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(b, &format!("{name}.ffn"), dim, hidden)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}
