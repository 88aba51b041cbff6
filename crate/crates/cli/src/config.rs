//! The flat key/value run configuration.

use std::fs;
use std::path::Path;

use mlfuse::backbones::{CnnConfig, ImageEncoderConfig, TextEncoderConfig};
use mlfuse::data::SynthConfig;
use mlfuse::model::{AblationVariant, ModelConfig, Task};
use mlfuse::training::TrainConfig;
use mlfuse::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every tunable in one flat TOML table. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub variant: String,
    pub seed: u64,

    pub n: usize,
    pub train_ratio: f64,
    pub classes: usize,
    pub min_prompt: usize,
    pub max_prompt: usize,
    pub scramble_block: usize,

    pub image_size: usize,
    pub patch_size: usize,
    pub image_dim: usize,
    pub image_depth: usize,
    pub image_heads: usize,
    pub mlp_ratio: usize,
    pub tap_layers: Option<[usize; 4]>,
    pub cnn_base_channels: usize,
    pub text_dim: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub fusion_heads: usize,
    pub queries: Option<usize>,
    pub head_hidden: Option<usize>,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let image = ImageEncoderConfig::default();
        let text = TextEncoderConfig::default();
        let model = ModelConfig::new(Task::PerceptualQuality);
        let train = TrainConfig::default();
        Self {
            task: Task::PerceptualQuality.name().into(),
            variant: AblationVariant::Full.name().into(),
            seed: 0,
            n: 800,
            train_ratio: mlfuse::data::DEFAULT_TRAIN_RATIO,
            classes: synth.classes,
            min_prompt: synth.min_prompt,
            max_prompt: synth.max_prompt,
            scramble_block: synth.block,
            image_size: image.image_size,
            patch_size: image.patch_size,
            image_dim: image.dim,
            image_depth: image.depth,
            image_heads: image.heads,
            mlp_ratio: image.mlp_ratio,
            tap_layers: None,
            cnn_base_channels: CnnConfig::default().base_channels,
            text_dim: text.dim,
            text_depth: text.depth,
            text_heads: text.heads,
            max_tokens: text.max_tokens,
            vocab_size: text.vocab_size,
            fusion_heads: model.fusion_heads,
            queries: None,
            head_hidden: None,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Writes the resolved config to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::Io { path, source: e })
    }

    pub fn task(&self) -> Result<Task> {
        self.task.parse()
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            image_size: self.image_size,
            channels: 3,
            classes: self.classes,
            vocab_size: self.vocab_size,
            min_prompt: self.min_prompt,
            max_prompt: self.max_prompt,
            block: self.scramble_block,
        };
        cfg.validate()?;
        if cfg.max_prompt > self.max_tokens {
            return Err(Error::Config(format!(
                "max_prompt {} exceeds max_tokens {}",
                cfg.max_prompt, self.max_tokens
            )));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!("train_ratio {} must lie in (0, 1)", self.train_ratio)));
        }
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let task = self.task()?;
        let mut image = ImageEncoderConfig::with_depth(self.image_depth);
        image.image_size = self.image_size;
        image.patch_size = self.patch_size;
        image.dim = self.image_dim;
        image.heads = self.image_heads;
        image.mlp_ratio = self.mlp_ratio;
        if let Some(taps) = self.tap_layers {
            image.tap_layers = taps;
        }
        let cfg = ModelConfig {
            task,
            image,
            cnn: CnnConfig {
                in_channels: 3,
                base_channels: self.cnn_base_channels,
            },
            text: TextEncoderConfig {
                vocab_size: self.vocab_size,
                dim: self.text_dim,
                depth: self.text_depth,
                heads: self.text_heads,
                max_tokens: self.max_tokens,
            },
            fusion_heads: self.fusion_heads,
            queries: self.queries,
            head_hidden: self.head_hidden,
            variant: self.variant.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
