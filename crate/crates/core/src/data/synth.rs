//! Procedural images with labels that are a known function of how they were
//! generated.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Dataset, PlantedFactors, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

/// Generation knobs shared by both datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Pattern classes; class `c` is named by token `c + 1`.
    pub classes: usize,
    pub vocab_size: usize,
    /// Prompts hold between `min_prompt` and `max_prompt` tokens.
    pub min_prompt: usize,
    pub max_prompt: usize,
    /// Side of a scrambling block for the quality dataset.
    pub block: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            classes: 4,
            vocab_size: 32,
            min_prompt: 3,
            max_prompt: 6,
            block: 8,
        }
    }
}

pub const MAX_NOISE: f64 = 0.5;
pub const MAX_SCRAMBLED: usize = 4;
/// Credit given to a mismatched prompt, scaled by the off-target weight.
pub const MISMATCH_CREDIT: f64 = 0.3;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 4 {
            return Err(Error::Config("at least 4 pattern classes are required".into()));
        }
        if self.vocab_size <= self.classes + 1 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no distractor tokens beyond {} classes",
                self.vocab_size, self.classes
            )));
        }
        if self.min_prompt == 0 || self.min_prompt > self.max_prompt {
            return Err(Error::Config("prompt length range is empty".into()));
        }
        if self.block == 0 || self.image_size % self.block != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of block {}",
                self.image_size, self.block
            )));
        }
        let blocks = (self.image_size / self.block).pow(2);
        if blocks < MAX_SCRAMBLED {
            return Err(Error::Config(format!("only {blocks} blocks to scramble")));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        Ok(())
    }

    pub fn class_token(&self, class: usize) -> u32 {
        class as u32 + 1
    }

    pub fn token_class(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        (1..=self.classes).contains(&t).then(|| t - 1)
    }
}

/// Quality label: both corruptions contribute half of the scale.
pub fn quality_mos(sigma: f64, scrambled: usize) -> f64 {
    (1.0 - (sigma / MAX_NOISE + scrambled as f64 / MAX_SCRAMBLED as f64) / 2.0).clamp(0.0, 1.0)
}

/// Correspondence label for an image whose class-`c` pattern has weight `w`.
pub fn correspondence_mos(matches: bool, weight: f64) -> f64 {
    if matches {
        weight
    } else {
        (1.0 - weight) * MISMATCH_CREDIT
    }
}

/// A pattern of class `class`: two oriented gratings near the class angle,
/// at random frequency and phase, normalized to unit RMS.
fn render_class(cfg: &SynthConfig, class: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let s = cfg.image_size;
    let base = class as f64 * PI / cfg.classes as f64;
    let mut img = vec![0.0; s * s];
    for _ in 0..2 {
        let angle = base + rng.uniform(-0.1, 0.1);
        let period = rng.uniform(6.0, 12.0);
        let phase = rng.uniform(0.0, 2.0 * PI);
        let amp = rng.uniform(0.5, 1.0);
        let (fx, fy) = (angle.cos() * 2.0 * PI / period, angle.sin() * 2.0 * PI / period);
        for y in 0..s {
            for x in 0..s {
                img[y * s + x] += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            }
        }
    }
    let rms = (img.iter().map(|v| v * v).sum::<f64>() / img.len() as f64).sqrt();
    img.iter_mut().for_each(|v| *v /= rms.max(1e-12));
    img
}

/// Shuffles the pixels inside `k` distinct blocks.
fn scramble_blocks(cfg: &SynthConfig, img: &mut [f64], k: usize, rng: &mut SplitMix64) {
    let (s, b) = (cfg.image_size, cfg.block);
    let per_row = s / b;
    let mut blocks: Vec<usize> = (0..per_row * per_row).collect();
    rng.shuffle(&mut blocks);
    for &blk in &blocks[..k] {
        let (by, bx) = (blk / per_row * b, blk % per_row * b);
        let mut pixels: Vec<f64> = (0..b * b).map(|i| img[(by + i / b) * s + bx + i % b]).collect();
        rng.shuffle(&mut pixels);
        for (i, v) in pixels.into_iter().enumerate() {
            img[(by + i / b) * s + bx + i % b] = v;
        }
    }
}

/// Replicates a single plane across channels with a per-image tint.
fn colorize(cfg: &SynthConfig, plane: &[f64], rng: &mut SplitMix64) -> Tensor<f32> {
    let mut data = Vec::with_capacity(cfg.channels * plane.len());
    for _ in 0..cfg.channels {
        let gain = rng.uniform(0.7, 1.0);
        data.extend(plane.iter().map(|&v| (gain * v) as f32));
    }
    Tensor::new(vec![cfg.channels, cfg.image_size, cfg.image_size], data)
        .expect("generated pixels are finite")
}

fn prompt_naming(cfg: &SynthConfig, class: usize, rng: &mut SplitMix64) -> Vec<u32> {
    let len = cfg.min_prompt + rng.below(cfg.max_prompt - cfg.min_prompt + 1);
    let first_distractor = cfg.classes + 1;
    let mut tokens: Vec<u32> = (0..len)
        .map(|_| (first_distractor + rng.below(cfg.vocab_size - first_distractor)) as u32)
        .collect();
    tokens[rng.below(len)] = cfg.class_token(class);
    tokens
}

fn check_count(n: usize) -> Result<()> {
    if n < 10 {
        return Err(Error::Config(format!("datasets need at least 10 samples, got {n}")));
    }
    Ok(())
}

/// Clean class patterns corrupted by Gaussian noise (`σ ~ U[0, 0.5]`) and
/// by scrambling `k ~ U{0..4}` blocks; quality falls with both.
pub fn generate_quality_dataset(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    check_count(n)?;
    let mut data = Dataset::with_capacity(cfg.clone(), n);
    for i in 0..n {
        let mut rng = SplitMix64::new(derive_seed(seed, &format!("quality/{i}")));
        let class = rng.below(cfg.classes);
        let sigma = rng.uniform(0.0, MAX_NOISE);
        let scrambled = rng.below(MAX_SCRAMBLED + 1);
        let mut plane = render_class(cfg, class, &mut rng);
        scramble_blocks(cfg, &mut plane, scrambled, &mut rng);
        for v in &mut plane {
            *v += sigma * rng.normal();
        }
        let image = colorize(cfg, &plane, &mut rng);
        let prompt_tokens = prompt_naming(cfg, class, &mut rng);
        data.push(
            SampleRecord {
                image_ref: Dataset::image_ref(i),
                prompt_tokens,
                mos_quality: quality_mos(sigma, scrambled),
                mos_correspondence: 1.0,
                split: Split::Train,
            },
            image,
            PlantedFactors::Quality {
                class,
                sigma,
                scrambled,
            },
        );
    }
    Ok(data)
}

/// Two-pattern blends scored against a prompt naming a target class.
///
/// The image shows class `c` at weight `w ~ U[0.5, 1]` blended with a second
/// class at `1 - w`. Half the prompts name `c`. The other half name the
/// second class, so the label is always a monotone function of how strongly
/// the named class appears: `w` when it dominates, `0.3·(1 - w)` otherwise.
pub fn generate_correspondence_dataset(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    check_count(n)?;
    let mut data = Dataset::with_capacity(cfg.clone(), n);
    for i in 0..n {
        let mut rng = SplitMix64::new(derive_seed(seed, &format!("correspondence/{i}")));
        let image_class = rng.below(cfg.classes);
        let other_class = (image_class + 1 + rng.below(cfg.classes - 1)) % cfg.classes;
        let weight = rng.uniform(0.5, 1.0);
        let matches = rng.below(2) == 0;
        let target = if matches { image_class } else { other_class };
        let a = render_class(cfg, image_class, &mut rng);
        let b = render_class(cfg, other_class, &mut rng);
        let plane: Vec<f64> = a.iter().zip(&b).map(|(x, y)| weight * x + (1.0 - weight) * y).collect();
        let image = colorize(cfg, &plane, &mut rng);
        let prompt_tokens = prompt_naming(cfg, target, &mut rng);
        data.push(
            SampleRecord {
                image_ref: Dataset::image_ref(i),
                prompt_tokens,
                mos_quality: 1.0,
                mos_correspondence: correspondence_mos(matches, weight),
                split: Split::Train,
            },
            image,
            PlantedFactors::Correspondence {
                target,
                image_class,
                other_class,
                weight,
            },
        );
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{srcc, ScorePairVector};

    #[test]
    fn planted_formula_endpoints() {
        assert_eq!(quality_mos(0.0, 0), 1.0);
        assert_eq!(quality_mos(0.5, 4), 0.0);
        assert_eq!(correspondence_mos(true, 1.0), 1.0);
        assert_eq!(correspondence_mos(false, 1.0), 0.0);
    }

    #[test]
    fn quality_is_monotone_in_noise() {
        for k in 0..=MAX_SCRAMBLED {
            let sweep: Vec<f64> = (0..=50).map(|i| quality_mos(i as f64 * 0.01, k)).collect();
            assert!(sweep.windows(2).all(|w| w[1] <= w[0]), "k={k}");
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_n_and_seed() {
        let cfg = SynthConfig::default();
        let a = generate_quality_dataset(&cfg, 12, 5).unwrap();
        let b = generate_quality_dataset(&cfg, 12, 5).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.images, b.images);
        let c = generate_quality_dataset(&cfg, 12, 6).unwrap();
        assert_ne!(a.records, c.records);
        // Sample i does not depend on n.
        let d = generate_quality_dataset(&cfg, 20, 5).unwrap();
        assert_eq!(a.images[..], d.images[..12]);
    }

    #[test]
    fn labels_in_unit_interval_and_prompts_name_a_class() {
        let cfg = SynthConfig::default();
        for data in [
            generate_quality_dataset(&cfg, 200, 1).unwrap(),
            generate_correspondence_dataset(&cfg, 200, 1).unwrap(),
        ] {
            for r in &data.records {
                assert!((0.0..=1.0).contains(&r.mos_quality));
                assert!((0.0..=1.0).contains(&r.mos_correspondence));
                let named: Vec<usize> = r.prompt_tokens.iter().filter_map(|&t| cfg.token_class(t)).collect();
                assert_eq!(named.len(), 1);
                assert!(r.prompt_tokens.len() <= cfg.max_prompt);
            }
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(generate_quality_dataset(&SynthConfig::default(), 9, 0).is_err());
    }

    #[test]
    fn correspondence_labels_follow_the_prompt() {
        let cfg = SynthConfig::default();
        let data = generate_correspondence_dataset(&cfg, 100, 2).unwrap();
        let mut matched = 0;
        for (r, f) in data.records.iter().zip(&data.factors) {
            let PlantedFactors::Correspondence { image_class, weight, target, .. } = *f else {
                panic!("wrong factor kind");
            };
            matched += usize::from(target == image_class);
            // Swap the class token for every class and recompute.
            for new_class in 0..cfg.classes {
                let mut tokens = r.prompt_tokens.clone();
                for t in &mut tokens {
                    if cfg.token_class(*t).is_some() {
                        *t = cfg.class_token(new_class);
                    }
                }
                let label = correspondence_mos(new_class == image_class, weight);
                let expected = if new_class == image_class { weight } else { (1.0 - weight) * 0.3 };
                assert_eq!(label, expected);
                assert_eq!(tokens.iter().filter_map(|&t| cfg.token_class(t)).next(), Some(new_class));
            }
            assert_eq!(r.mos_correspondence, correspondence_mos(target == image_class, weight));
        }
        assert!((30..=70).contains(&matched));
    }

    #[test]
    fn quality_signal_is_recoverable_by_linear_regression() {
        let cfg = SynthConfig::default();
        let data = generate_quality_dataset(&cfg, 300, 3).unwrap();
        let xs: Vec<(f64, f64)> = data
            .factors
            .iter()
            .map(|f| match *f {
                PlantedFactors::Quality { sigma, scrambled, .. } => (sigma, scrambled as f64),
                _ => unreachable!(),
            })
            .collect();
        let y: Vec<f64> = data.records.iter().map(|r| r.mos_quality).collect();
        // Least squares on [1, σ, k] via the normal equations.
        let mut ata = [[0.0; 3]; 3];
        let mut aty = [0.0; 3];
        for (&(s, k), &t) in xs.iter().zip(&y) {
            let row = [1.0, s, k];
            for i in 0..3 {
                aty[i] += row[i] * t;
                for j in 0..3 {
                    ata[i][j] += row[i] * row[j];
                }
            }
        }
        let beta = solve3(ata, aty);
        let pred: Vec<f64> = xs.iter().map(|&(s, k)| beta[0] + beta[1] * s + beta[2] * k).collect();
        let s = srcc(&ScorePairVector::new(pred, y).unwrap()).unwrap();
        assert!(s > 0.99, "{s}");
    }

    fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
        for col in 0..3 {
            let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            for row in col + 1..3 {
                let f = a[row][col] / a[col][col];
                for c in col..3 {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = [0.0; 3];
        for row in (0..3).rev() {
            let s: f64 = (row + 1..3).map(|c| a[row][c] * x[c]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    #[test]
    fn scrambling_preserves_block_contents() {
        let cfg = SynthConfig::default();
        let mut rng = SplitMix64::new(4);
        let clean = render_class(&cfg, 1, &mut rng);
        let mut scrambled = clean.clone();
        scramble_blocks(&cfg, &mut scrambled, 3, &mut rng);
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        assert_eq!(sorted(&clean), sorted(&scrambled));
        let changed_blocks = (0..16)
            .filter(|blk| {
                let (by, bx) = (blk / 4 * 8, blk % 4 * 8);
                (0..64).any(|i| clean[(by + i / 8) * 32 + bx + i % 8] != scrambled[(by + i / 8) * 32 + bx + i % 8])
            })
            .count();
        assert_eq!(changed_blocks, 3);
    }
}
