//! Full networks: backbones, one fusion block per level, joint aggregation
//! and a regression head.
//!
//! `MGLF` fuses transformer and CNN features for perceptual quality; `MPEF`
//! fuses the prompt and transformer features for text-image correspondence.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbones::{
    Adapter, Cnn, CnnConfig, ImageEncoderConfig, ImageTransformer, PromptBatch, TextEncoder,
    TextEncoderConfig, LEVELS,
};
use crate::error::{Error, Result};
use crate::fusion::{BlockKind, FusionBlock, FusionSpec};
use crate::nn::{Builder, Linear};
use crate::params::ParamStore;
use crate::rng::derive_seed;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Scored by MGLF-Net.
    PerceptualQuality,
    /// Scored by MPEF-Net.
    Correspondence,
}

impl Task {
    pub fn block_kind(self) -> BlockKind {
        match self {
            Task::PerceptualQuality => BlockKind::Glf,
            Task::Correspondence => BlockKind::Pef,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::PerceptualQuality => "quality",
            Task::Correspondence => "correspondence",
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality" | "perceptual_quality" | "mglf" => Ok(Task::PerceptualQuality),
            "correspondence" | "mpef" => Ok(Task::Correspondence),
            _ => Err(Error::Config(format!(
                "unknown task {s:?} (expected quality or correspondence)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    WithoutTransformerFeatures,
    WithoutCnnFeatures,
    WithoutPromptEmbedded,
    SingleLevelLast,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::WithoutTransformerFeatures,
        AblationVariant::WithoutCnnFeatures,
        AblationVariant::WithoutPromptEmbedded,
        AblationVariant::SingleLevelLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WithoutTransformerFeatures => "without_transformer_features",
            AblationVariant::WithoutCnnFeatures => "without_cnn_features",
            AblationVariant::WithoutPromptEmbedded => "without_prompt_embedded",
            AblationVariant::SingleLevelLast => "single_level_last",
        }
    }

    pub fn valid_for(self, task: Task) -> bool {
        match self {
            AblationVariant::Full | AblationVariant::SingleLevelLast => true,
            AblationVariant::WithoutTransformerFeatures | AblationVariant::WithoutCnnFeatures => {
                task == Task::PerceptualQuality
            }
            AblationVariant::WithoutPromptEmbedded => task == Task::Correspondence,
        }
    }

    pub fn check(self, task: Task) -> Result<()> {
        if self.valid_for(task) {
            Ok(())
        } else {
            Err(Error::Config(format!("ablation {self} does not apply to the {task} task")))
        }
    }
}

impl FromStr for AblationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub image: ImageEncoderConfig,
    pub cnn: CnnConfig,
    pub text: TextEncoderConfig,
    pub fusion_heads: usize,
    /// Learnable queries per block; `None` picks 4 for GLF and 8 for PEF.
    pub queries: Option<usize>,
    /// Hidden width of the regression head; `None` means `D / 2`.
    pub head_hidden: Option<usize>,
    pub variant: AblationVariant,
}

impl ModelConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            image: ImageEncoderConfig::default(),
            cnn: CnnConfig::default(),
            text: TextEncoderConfig::default(),
            fusion_heads: 4,
            queries: None,
            head_hidden: None,
            variant: AblationVariant::Full,
        }
    }

    pub fn dim(&self) -> usize {
        self.image.dim
    }

    /// The smallest useful configuration (D=8, depth 4, N_Q=2), sized for
    /// exhaustive finite-difference checks.
    pub fn tiny(task: Task) -> Self {
        let mut image = ImageEncoderConfig::with_depth(4);
        image.dim = 8;
        image.heads = 2;
        image.tap_layers = [1, 2, 3, 4];
        Self {
            task,
            image,
            cnn: CnnConfig {
                in_channels: 3,
                base_channels: 1,
            },
            text: TextEncoderConfig {
                vocab_size: 12,
                dim: 8,
                depth: 1,
                heads: 2,
                max_tokens: 4,
            },
            fusion_heads: 2,
            queries: Some(2),
            head_hidden: None,
            variant: AblationVariant::Full,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.queries.unwrap_or_else(|| self.task.block_kind().default_queries())
    }

    pub fn head_width(&self) -> usize {
        self.head_hidden.unwrap_or(self.dim() / 2).max(1)
    }

    /// Feature levels that feed aggregation.
    pub fn levels(&self) -> Vec<usize> {
        match self.variant {
            AblationVariant::SingleLevelLast => vec![LEVELS - 1],
            _ => (0..LEVELS).collect(),
        }
    }

    pub fn uses_transformer(&self) -> bool {
        self.variant != AblationVariant::WithoutTransformerFeatures
    }

    pub fn uses_cnn(&self) -> bool {
        self.task == Task::PerceptualQuality && self.variant != AblationVariant::WithoutCnnFeatures
    }

    pub fn uses_text(&self) -> bool {
        self.task == Task::Correspondence && self.variant != AblationVariant::WithoutPromptEmbedded
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.check(self.task)?;
        self.image.validate()?;
        if self.uses_cnn() {
            self.cnn.validate()?;
            if self.cnn.in_channels != self.image.channels {
                return Err(Error::Config(format!(
                    "cnn takes {} channels, images have {}",
                    self.cnn.in_channels, self.image.channels
                )));
            }
            if self.image.image_size % (1 << LEVELS) != 0 {
                return Err(Error::Config(format!(
                    "image_size {} must be divisible by {} for the cnn",
                    self.image.image_size,
                    1 << LEVELS
                )));
            }
        }
        if self.task == Task::Correspondence {
            self.text.validate()?;
        }
        if self.num_queries() == 0 {
            return Err(Error::Config("queries must be positive".into()));
        }
        if self.fusion_heads == 0 || self.dim() % self.fusion_heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} fusion heads",
                self.dim(),
                self.fusion_heads
            )));
        }
        Ok(())
    }
}

/// `D → hidden → GELU → 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl RegressionHead {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(b, &format!("{name}.fc2"), hidden, 1, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        let s = g.shape(f);
        if s.len() != 2 || s[1] != self.fc1.in_dim {
            return Err(Error::dim(
                "regress",
                format!("expected [B, {}], got {s:?}", self.fc1.in_dim),
            ));
        }
        let h = self.fc1.forward(g, f)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Joins the refined query sets along the token axis and averages them:
/// `[B, N_Q, D]` × levels → `[B, D]`.
pub fn aggregate<T: Real>(g: &mut Graph<'_, T>, q_tilde: &[Var]) -> Result<Var> {
    let cat = concat_levels(g, q_tilde)?;
    g.mean_tokens(cat)
}

/// The intermediate `[B, Σ N_Q, D]` tensor of [`aggregate`].
pub fn concat_levels<T: Real>(g: &mut Graph<'_, T>, q_tilde: &[Var]) -> Result<Var> {
    if q_tilde.is_empty() {
        return Err(Error::dim("aggregate", "no levels to aggregate"));
    }
    g.concat_tokens(q_tilde)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    vit: Option<ImageTransformer>,
    cnn: Option<Cnn>,
    /// Indexed by level; `None` for levels not in use.
    adapters: Vec<Option<Adapter>>,
    text: Option<TextEncoder>,
    blocks: Vec<FusionBlock>,
    head: RegressionHead,
}

impl Model {
    /// Registers every parameter in `store` (which should be empty) with
    /// initial values drawn from `seed`.
    pub fn build<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim();
        let levels = cfg.levels();
        // Every module gets its own init stream, so removing one under an
        // ablation leaves the others' initial values unchanged.
        fn sub<'s, T: Real>(store: &'s mut ParamStore<T>, seed: u64, label: &str) -> Builder<'s, T> {
            Builder::new(store, derive_seed(seed, label))
        }

        let vit = if cfg.uses_transformer() {
            Some(ImageTransformer::new(&mut sub(store, seed, "vit"), "vit", &cfg.image)?)
        } else {
            None
        };
        let (cnn, adapters) = if cfg.uses_cnn() {
            let cnn = Cnn::new(&mut sub(store, seed, "cnn"), "cnn", &cfg.cnn)?;
            let adapters = (0..LEVELS)
                .map(|i| {
                    if levels.contains(&i) {
                        let name = format!("adapter.level{i}");
                        Adapter::new(&mut sub(store, seed, &name), &name, cfg.cnn.stage_channels(i), d).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(cnn), adapters)
        } else {
            (None, vec![None; LEVELS])
        };
        let text = if cfg.uses_text() {
            Some(TextEncoder::new(&mut sub(store, seed, "text"), "text", &cfg.text, d)?)
        } else {
            None
        };
        let kind = cfg.task.block_kind();
        let (first_stage, second_stage) = match kind {
            BlockKind::Glf => (cfg.uses_transformer(), cfg.uses_cnn()),
            BlockKind::Pef => (cfg.uses_text(), true),
        };
        let blocks = levels
            .iter()
            .map(|&level| {
                let spec = FusionSpec {
                    kind,
                    level,
                    dim: d,
                    heads: cfg.fusion_heads,
                    queries: cfg.num_queries(),
                    first_stage,
                    second_stage,
                };
                FusionBlock::new(&mut sub(store, seed, &format!("{}.level{level}", kind.prefix())), spec)
            })
            .collect::<Result<_>>()?;
        let head = RegressionHead::new(&mut sub(store, seed, "head"), "head", d, cfg.head_width())?;
        Ok(Self {
            cfg: cfg.clone(),
            vit,
            cnn,
            adapters,
            text,
            blocks,
            head,
        })
    }

    pub fn blocks(&self) -> &[FusionBlock] {
        &self.blocks
    }

    pub fn head(&self) -> &RegressionHead {
        &self.head
    }

    fn transformer_levels<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Option<Vec<Var>>> {
        self.vit.as_ref().map(|vit| vit.forward(g, image)).transpose()
    }

    /// Refined query sets `Q̃_i`, one per level in use.
    pub fn refine<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        image: Var,
        prompts: Option<&PromptBatch>,
    ) -> Result<Vec<Var>> {
        let batch = g.shape(image).first().copied().unwrap_or(0);
        let global = self.transformer_levels(g, image)?;
        match self.cfg.task {
            Task::PerceptualQuality => {
                let maps = self.cnn.as_ref().map(|c| c.forward(g, image)).transpose()?;
                let mut out = Vec::with_capacity(self.blocks.len());
                for block in &self.blocks {
                    let i = block.spec.level;
                    let local = match (&maps, &self.adapters[i]) {
                        (Some(maps), Some(adapter)) => Some(adapter.forward(g, maps[i])?),
                        _ => None,
                    };
                    let gi = global.as_ref().map(|gl| gl[i]);
                    out.push(block.glf(g, batch, gi, local)?);
                }
                Ok(out)
            }
            Task::Correspondence => {
                let encoded = match (&self.text, prompts) {
                    (Some(text), Some(p)) => {
                        if p.batch != batch {
                            return Err(Error::dim(
                                "forward_mpef",
                                format!("{} prompts for {batch} images", p.batch),
                            ));
                        }
                        Some(text.forward(g, p)?)
                    }
                    (Some(_), None) => {
                        return Err(Error::Contract("the correspondence model needs prompts".into()))
                    }
                    (None, _) => None,
                };
                let global = global.expect("PEF always builds the image transformer");
                let mut out = Vec::with_capacity(self.blocks.len());
                for block in &self.blocks {
                    let prompt = encoded.as_ref().map(|e| (e.tokens, &e.mask));
                    out.push(block.pef(g, batch, prompt, Some(global[block.spec.level]))?);
                }
                Ok(out)
            }
        }
    }

    /// Image batch `[B, C, H, W]` → scores `[B, 1]`.
    pub fn forward_mglf<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        if self.cfg.task != Task::PerceptualQuality {
            return Err(Error::Contract("forward_mglf called on a correspondence model".into()));
        }
        self.forward(g, image, None)
    }

    /// Image batch plus prompts → scores `[B, 1]`.
    pub fn forward_mpef<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        image: Var,
        prompts: &PromptBatch,
    ) -> Result<Var> {
        if self.cfg.task != Task::Correspondence {
            return Err(Error::Contract("forward_mpef called on a quality model".into()));
        }
        self.forward(g, image, Some(prompts))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        image: Var,
        prompts: Option<&PromptBatch>,
    ) -> Result<Var> {
        let q = self.refine(g, image, prompts)?;
        let f = aggregate(g, &q)?;
        self.head.forward(g, f)
    }

    /// Forward-only scoring; returns one score per image.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        prompts: Option<&PromptBatch>,
    ) -> Result<Vec<T>> {
        let mut g = Graph::inference(store);
        let x = g.input(images, false);
        let y = self.forward(&mut g, x, prompts)?;
        Ok(g.value(y).to_vec())
    }
}
