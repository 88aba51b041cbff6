//! Randomly initialized stand-ins for the pretrained encoders: a ViT-style
//! image transformer with four tapped layers, a four-stage residual CNN with
//! per-level adapters, and a small text encoder with a projection to the
//! image width.

mod cnn;
mod text;
mod vit;

pub use cnn::{Adapter, Cnn, CnnConfig};
pub use text::{PromptBatch, PromptEncoding, TextEncoder, TextEncoderConfig, PAD_TOKEN};
pub use vit::{ImageEncoderConfig, ImageTransformer};

/// Number of feature levels tapped from every backbone.
pub const LEVELS: usize = 4;
