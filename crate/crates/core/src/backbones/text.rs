use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, TransformerLayer};
use crate::params::{Init, ParamId};
use crate::tensor::Real;

/// Reserved token id used to pad prompts to a fixed length.
pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Internal width; deliberately different from the image width.
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_tokens: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            dim: 32,
            depth: 2,
            heads: 4,
            max_tokens: 16,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.max_tokens == 0 || self.depth == 0 {
            return Err(Error::Config(
                "text encoder needs vocab_size >= 2 and positive depth and max_tokens".into(),
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Prompts padded to a common length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl PromptBatch {
    /// Pads each prompt with [`PAD_TOKEN`] to `len` tokens.
    pub fn pad(prompts: &[&[u32]], len: usize, vocab_size: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(prompts.len() * len);
        for p in prompts {
            if p.len() > len {
                return Err(Error::InvalidInput(format!(
                    "prompt of {} tokens exceeds the limit of {len}",
                    p.len()
                )));
            }
            if let Some(&bad) = p.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::InvalidInput(format!(
                    "token id {bad} outside vocabulary of {vocab_size}"
                )));
            }
            ids.extend(p.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat(PAD_TOKEN as usize).take(len - p.len()));
        }
        Ok(Self {
            batch: prompts.len(),
            len,
            ids,
        })
    }

    pub fn valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD_TOKEN as usize).collect()
    }
}

/// The projected prompt sequence and which of its positions are real tokens.
#[derive(Debug, Clone)]
pub struct PromptEncoding {
    pub tokens: Var,
    pub mask: AttnMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    embed: ParamId,
    positions: ParamId,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    projection: Linear,
}

impl TextEncoder {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: &TextEncoderConfig,
        out_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let std = Init::ScaledNormal { fan_in: d };
        let embed = b.param(&format!("{name}.embed"), &[cfg.vocab_size, d], std)?;
        let positions = b.param(&format!("{name}.positions"), &[cfg.max_tokens, d], std)?;
        let layers = (0..cfg.depth)
            .map(|i| TransformerLayer::new(b, &format!("{name}.layer{i}"), d, cfg.heads, 4 * d))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            positions,
            layers,
            final_norm: LayerNorm::new(b, &format!("{name}.final_norm"), d)?,
            projection: Linear::new(b, &format!("{name}.projection"), d, out_dim, true)?,
        })
    }

    /// Encodes padded prompts into `[B, N_p, D]`. Pad positions never
    /// influence real positions: each query sees the real tokens plus itself.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, prompts: &PromptBatch) -> Result<PromptEncoding> {
        if prompts.len != self.cfg.max_tokens {
            return Err(Error::dim(
                "encode_prompt",
                format!("prompts padded to {}, encoder expects {}", prompts.len, self.cfg.max_tokens),
            ));
        }
        let (batch, n) = (prompts.batch, prompts.len);
        let valid = prompts.valid();
        let mut allowed = Vec::with_capacity(batch * n * n);
        for b in 0..batch {
            for q in 0..n {
                allowed.extend((0..n).map(|k| valid[b * n + k] || k == q));
            }
        }
        let self_mask = AttnMask::new(batch, n, n, allowed)?;

        let table = g.param(self.embed);
        let x = g.embedding(table, &prompts.ids, &[batch, n])?;
        let pos = g.param(self.positions);
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x, Some(&self_mask))?;
        }
        let x = self.final_norm.forward(g, x)?;
        let tokens = self.projection.forward(g, x)?;
        Ok(PromptEncoding {
            tokens,
            mask: AttnMask::keys(batch, n, valid)?,
        })
    }
}
