use serde::{Deserialize, Serialize};

use super::LEVELS;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear};
use crate::params::{Init, ParamId};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub in_channels: usize,
    /// Channels of stage 1; each later stage doubles them.
    pub base_channels: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
        }
    }
}

impl CnnConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("cnn channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param(
                &format!("{name}.weight"),
                &[cout, cin, 3, 3],
                Init::ScaledNormal { fan_in: cin * 9 },
            )?,
            bias: b.param(&format!("{name}.bias"), &[cout], Init::Zeros)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, Some(b), stride, 1)
    }
}

/// One stage: a stride-2 3x3 convolution followed by a pre-activation
/// residual unit `h + conv(gelu(h))`.
#[derive(Debug, Clone, PartialEq)]
struct Stage {
    down: Conv,
    residual: Conv,
}

/// Four-stage residual CNN; spatial extent halves and channels double at
/// every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub cfg: CnnConfig,
    stages: Vec<Stage>,
}

impl Cnn {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, cfg: &CnnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut cin = cfg.in_channels;
        for s in 0..LEVELS {
            let cout = cfg.stage_channels(s);
            stages.push(Stage {
                down: Conv::new(b, &format!("{name}.stage{s}.down"), cin, cout)?,
                residual: Conv::new(b, &format!("{name}.stage{s}.residual"), cout, cout)?,
            });
            cin = cout;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    /// `[B, C, H, W]` → four feature maps `[B, base·2^i, H/2^(i+1), W/2^(i+1)]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Vec<Var>> {
        let s = g.shape(image).to_vec();
        let factor = 1 << LEVELS;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::dim(
                "encode_image_cnn",
                format!(
                    "expected [B, {}, H, W] with H, W divisible by {factor}, got {s:?}",
                    self.cfg.in_channels
                ),
            ));
        }
        let mut x = image;
        let mut maps = Vec::with_capacity(LEVELS);
        for stage in &self.stages {
            let h = stage.down.forward(g, x, 2)?;
            let a = g.gelu(h)?;
            let r = stage.residual.forward(g, a, 1)?;
            x = g.add(h, r)?;
            maps.push(x);
        }
        Ok(maps)
    }
}

/// Turns a `[B, C, H, W]` map into a `[B, H·W, D]` token sequence:
/// flatten space, project channels to `D`, layer-normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    proj: Linear,
    norm: LayerNorm,
}

impl Adapter {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, channels: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(b, &format!("{name}.proj"), channels, dim, true)?,
            norm: LayerNorm::new(b, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, map: Var) -> Result<Var> {
        let s = g.shape(map).to_vec();
        if s.len() != 4 || s[1] != self.proj.in_dim {
            return Err(Error::dim(
                "adapt",
                format!("expected [B, {}, H, W], got {s:?}", self.proj.in_dim),
            ));
        }
        let x = g.reshape(map, &[s[0], s[1], s[2] * s[3]])?;
        let x = g.transpose(x)?;
        let x = self.proj.forward(g, x)?;
        self.norm.forward(g, x)
    }
}
