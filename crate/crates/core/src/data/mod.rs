//! Synthetic datasets, train/test splits and the on-disk manifest.

mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use synth::{
    correspondence_mos, generate_correspondence_dataset, generate_quality_dataset, quality_mos,
    SynthConfig, MAX_NOISE, MAX_SCRAMBLED, MISMATCH_CREDIT,
};

use crate::backbones::{PromptBatch, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::rng::{derive_seed, mix64};
use crate::tensor::{read_blob, write_blob};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_ref: String,
    pub prompt_tokens: Vec<u32>,
    pub mos_quality: f64,
    pub mos_correspondence: f64,
    pub split: Split,
}

impl SampleRecord {
    pub fn label(&self, task: Task) -> f64 {
        match task {
            Task::PerceptualQuality => self.mos_quality,
            Task::Correspondence => self.mos_correspondence,
        }
    }
}

/// The generating parameters behind a label; kept in memory only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlantedFactors {
    Quality {
        class: usize,
        sigma: f64,
        scrambled: usize,
    },
    Correspondence {
        target: usize,
        image_class: usize,
        other_class: usize,
        weight: f64,
    },
}

/// Records with their decoded images. `factors` is empty for a dataset read
/// back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub records: Vec<SampleRecord>,
    pub images: Vec<Tensor<f32>>,
    pub factors: Vec<PlantedFactors>,
}

/// Deterministic split: each index gets a seeded key, the keys are sorted
/// and the first `round(n * ratio)` indices go to train.
pub fn assign_splits(n: usize, ratio: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("train ratio {ratio} is outside [0, 1]")));
    }
    let base = derive_seed(seed, "split");
    let mut order: Vec<(u64, usize)> = (0..n).map(|i| (mix64(base ^ mix64(i as u64)), i)).collect();
    order.sort_unstable();
    let n_train = (n as f64 * ratio).round() as usize;
    let mut splits = vec![Split::Test; n];
    for &(_, i) in &order[..n_train] {
        splits[i] = Split::Train;
    }
    Ok(splits)
}

impl Dataset {
    pub(crate) fn with_capacity(config: SynthConfig, n: usize) -> Self {
        Self {
            config,
            records: Vec::with_capacity(n),
            images: Vec::with_capacity(n),
            factors: Vec::with_capacity(n),
        }
    }

    pub(crate) fn push(&mut self, record: SampleRecord, image: Tensor<f32>, factors: PlantedFactors) {
        self.records.push(record);
        self.images.push(image);
        self.factors.push(factors);
    }

    pub fn image_ref(index: usize) -> String {
        format!("{IMAGE_DIR}/{index:06}.mlt")
    }

    pub fn generate(task: Task, cfg: &SynthConfig, n: usize, seed: u64) -> Result<Self> {
        let mut data = match task {
            Task::PerceptualQuality => generate_quality_dataset(cfg, n, seed)?,
            Task::Correspondence => generate_correspondence_dataset(cfg, n, seed)?,
        };
        data.split(DEFAULT_TRAIN_RATIO, seed)?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&mut self, ratio: f64, seed: u64) -> Result<()> {
        let splits = assign_splits(self.len(), ratio, seed)?;
        for (r, s) in self.records.iter_mut().zip(splits) {
            r.split = s;
        }
        Ok(())
    }

    /// Indices in `split`, in ascending order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn labels(&self, task: Task, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.records[i].label(task)).collect()
    }

    /// Stacks images into `[B, C, H, W]`.
    pub fn image_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&items)
    }

    /// Pads the prompts of `indices` to the encoder's token budget.
    pub fn prompt_batch(&self, indices: &[usize], text: &TextEncoderConfig) -> Result<PromptBatch> {
        let prompts: Vec<&[u32]> = indices.iter().map(|&i| self.records[i].prompt_tokens.as_slice()).collect();
        PromptBatch::pad(&prompts, text.max_tokens, text.vocab_size)
    }

    /// Writes `manifest.jsonl` and one blob per image under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join(IMAGE_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let manifest = dir.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for (record, image) in self.records.iter().zip(&self.images) {
            write_blob(&dir.join(&record.image_ref), image)?;
            serde_json::to_writer(&mut out, record).expect("records serialize");
            out.push(b'\n');
        }
        let mut file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
        file.write_all(&out).map_err(|e| Error::io(&manifest, e))
    }

    /// Reads a manifest and every image it references.
    pub fn load(dir: &Path, config: SynthConfig) -> Result<Self> {
        let records = read_manifest(&dir.join(MANIFEST_FILE))?;
        let mut data = Self::with_capacity(config, records.len());
        for record in records {
            let path = dir.join(&record.image_ref);
            if !path.is_file() {
                return Err(Error::Integrity(format!(
                    "manifest references missing image {}",
                    path.display()
                )));
            }
            let image = read_blob(&path)?.into_real::<f32>();
            data.records.push(record);
            data.images.push(image);
        }
        Ok(data)
    }
}

/// Parses a JSONL manifest; errors carry the 1-based line number.
pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        for (name, v) in [("mos_quality", record.mos_quality), ("mos_correspondence", record.mos_correspondence)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(parse_err(i + 1, format!("{name} {v} is outside [0, 1]")));
            }
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_samples_split_eight_two() {
        let s = assign_splits(10, 0.8, 1).unwrap();
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 8);
        assert_eq!(assign_splits(800, 0.8, 7).unwrap().iter().filter(|&&x| x == Split::Test).count(), 160);
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        assert_eq!(assign_splits(50, 0.8, 3).unwrap(), assign_splits(50, 0.8, 3).unwrap());
        let memberships: std::collections::HashSet<Vec<Split>> =
            (0..20).map(|s| assign_splits(50, 0.8, s).unwrap()).collect();
        assert_eq!(memberships.len(), 20);
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(matches!(assign_splits(10, 1.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batches_have_expected_shapes() {
        let data = Dataset::generate(Task::Correspondence, &SynthConfig::default(), 12, 0).unwrap();
        let idx = [0, 3, 5];
        assert_eq!(data.image_batch(&idx).unwrap().shape(), &[3, 3, 32, 32]);
        let p = data.prompt_batch(&idx, &TextEncoderConfig::default()).unwrap();
        assert_eq!((p.batch, p.len), (3, 16));
    }
}
