//! Multi-level feature fusion networks for AI-generated image quality
//! assessment, built on a small reverse-mode autodiff engine.

pub mod autograd;
pub mod backbones;
pub mod data;
pub mod fusion;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
