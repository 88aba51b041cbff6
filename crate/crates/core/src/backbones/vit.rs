use serde::{Deserialize, Serialize};

use super::LEVELS;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear, TransformerLayer};
use crate::params::{Init, ParamId};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based layer indices whose outputs are emitted, strictly increasing,
    /// the last equal to `depth`.
    pub tap_layers: [usize; LEVELS],
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self::with_depth(12)
    }
}

impl ImageEncoderConfig {
    /// Default toy encoder with taps at a quarter, half, three quarters and
    /// all of `depth`.
    pub fn with_depth(depth: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            tap_layers: Self::default_taps(depth),
        }
    }

    pub fn default_taps(depth: usize) -> [usize; LEVELS] {
        [depth / 4, depth / 2, 3 * depth / 4, depth]
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Tokens per level: patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        let t = self.tap_layers;
        if t[0] == 0 || t.windows(2).any(|w| w[0] >= w[1]) || t[LEVELS - 1] != self.depth {
            return Err(Error::Config(format!(
                "tap layers {t:?} must be strictly increasing, start at 1 or later and end at depth {}",
                self.depth
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "image width {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("image channels and mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Patch embedding, class token, learned positions, then pre-norm layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTransformer {
    pub cfg: ImageEncoderConfig,
    patch_embed: Linear,
    class_token: ParamId,
    positions: ParamId,
    layers: Vec<TransformerLayer>,
}

impl ImageTransformer {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &ImageEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        let patch_embed = Linear::new(b, &format!("{name}.patch_embed"), patch_dim, d, true)?;
        let std = Init::ScaledNormal { fan_in: d };
        let class_token = b.param(&format!("{name}.class_token"), &[1, d], std)?;
        let positions = b.param(&format!("{name}.positions"), &[cfg.tokens(), d], std)?;
        let layers = (0..cfg.depth)
            .map(|i| {
                TransformerLayer::new(b, &format!("{name}.layer{i}"), d, cfg.heads, d * cfg.mlp_ratio)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            class_token,
            positions,
            layers,
        })
    }

    /// `[B, C, H, W]` → the hidden states after each tap layer, each
    /// `[B, N, D]` with the class token first.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::dim(
                "encode_image_transformer",
                format!(
                    "expected [B, {}, {}, {}], got {s:?}",
                    cfg.channels, cfg.image_size, cfg.image_size
                ),
            ));
        }
        let (batch, c, p, n) = (s[0], cfg.channels, cfg.patch_size, cfg.grid());
        let x = g.reshape(image, &[batch, c, n, p, n, p])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, &[batch, n * n, c * p * p])?;
        let patches = self.patch_embed.forward(g, x)?;
        let cls = g.param(self.class_token);
        let cls = g.expand_batch(cls, batch)?;
        let x = g.concat_tokens(&[cls, patches])?;
        let pos = g.param(self.positions);
        let mut x = g.add(x, pos)?;

        let mut taps = Vec::with_capacity(LEVELS);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x, None)?;
            if cfg.tap_layers.contains(&(i + 1)) {
                taps.push(x);
            }
        }
        Ok(taps)
    }
}
