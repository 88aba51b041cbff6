//! Loss, optimizer, the training and evaluation loops, checkpoints and the
//! ablation harness.

mod ablation;
mod adamw;
mod checkpoint;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablation::{ablate, ablation_rows, AblationReport, AblationRow, AblationSetting};
pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autograd::{Graph, Var};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{plcc, srcc, ScorePairVector};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Real, Tensor};

/// Optimization settings. The task and ablation variant belong to the
/// model's configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: opt.learning_rate,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        self.optimizer().validate()
    }
}

/// Mean squared error over a `[B, 1]` batch.
pub fn mse_loss<T: Real>(g: &mut Graph<'_, T>, pred: Var, label: Var) -> Result<Var> {
    g.mse(pred, label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// `None` when the correlation is undefined (constant predictions).
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
}

pub fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).expect("history serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRecord>,
    pub last: Checkpoint<f32>,
    /// Epoch with the highest test SRCC, 1-based.
    pub best_epoch: usize,
    pub best: Checkpoint<f32>,
}

impl TrainOutcome {
    /// The last epoch's test record.
    pub fn final_test(&self) -> &HistoryRecord {
        self.history
            .iter()
            .rev()
            .find(|r| r.split == Split::Test)
            .expect("every epoch records a test row")
    }
}

/// SRCC and PLCC of a set of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub srcc: f64,
    pub plcc: f64,
}

pub fn correlations(predictions: &[f64], labels: &[f64]) -> Result<Correlations> {
    let v = ScorePairVector::new(predictions.to_vec(), labels.to_vec())?;
    Ok(Correlations {
        srcc: srcc(&v)?,
        plcc: plcc(&v)?,
    })
}

/// Scores `indices` in batches of `batch`.
pub fn predict(model: &Model, store: &ParamStore<f32>, data: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let images = data.image_batch(chunk)?;
        let prompts = data.prompt_batch(chunk, &model.cfg.text)?;
        let scores = model.predict(store, &images, model.cfg.uses_text().then_some(&prompts))?;
        out.extend(scores.iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// SRCC and PLCC of the model on `indices`.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, data: &Dataset, indices: &[usize], batch: usize) -> Result<Correlations> {
    if indices.len() < 2 {
        return Err(Error::InvalidInput("evaluation needs at least two records".into()));
    }
    let preds = predict(model, store, data, indices, batch)?;
    correlations(&preds, &data.labels(model.cfg.task, indices))
}

/// First parameter, in store order, holding a non-finite value or gradient.
fn first_non_finite<T: Real>(store: &ParamStore<T>) -> Option<String> {
    store
        .iter()
        .find(|p| {
            p.tensor.data().iter().any(|v| !v.is_finite())
                || p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()))
        })
        .map(|p| p.name.clone())
}

fn diverged<T: Real>(store: &ParamStore<T>, epoch: usize, cause: &Error) -> Error {
    let parameter = first_non_finite(store).unwrap_or_else(|| format!("none (non-finite activation: {cause})"));
    Error::Diverged { epoch, parameter }
}

/// One optimization step on `batch`; returns the batch loss.
fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW<f32>,
    data: &Dataset,
    batch: &[usize],
    cfg: &AdamWConfig,
    epoch: usize,
) -> Result<f64> {
    let images = data.image_batch(batch)?;
    let prompts = data.prompt_batch(batch, &model.cfg.text)?;
    let labels: Vec<f32> = data.labels(model.cfg.task, batch).iter().map(|&v| v as f32).collect();
    let labels = Tensor::new(vec![batch.len(), 1], labels)?;
    store.zero_grad();
    let (loss, grads) = {
        let mut g = Graph::with_params(store);
        let run = |g: &mut Graph<'_, f32>| -> Result<(f64, _)> {
            let x = g.input(&images, false);
            let y = g.input(&labels, false);
            let pred = model.forward(g, x, model.cfg.uses_text().then_some(&prompts))?;
            let loss = mse_loss(g, pred, y)?;
            Ok((g.value(loss)[0].as_f64(), g.backward(loss)?))
        };
        match run(&mut g) {
            Ok(r) => r,
            Err(e) if e.is_numerical() => {
                drop(g);
                return Err(diverged(store, epoch, &e));
            }
            Err(e) => return Err(e),
        }
    };
    grads.accumulate_into(store);
    if first_non_finite(store).is_some() {
        return Err(diverged(store, epoch, &Error::NonFinite { op: "backward" }));
    }
    opt.step(store, cfg)?;
    if first_non_finite(store).is_some() {
        return Err(diverged(store, epoch, &Error::NonFinite { op: "adamw" }));
    }
    Ok(loss)
}

/// Trains `model` on the train split, evaluating on the test split after
/// every epoch. `observer` sees each history record as it is produced.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&HistoryRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    let test_idx = data.indices(Split::Test);
    if train_idx.is_empty() || test_idx.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need a nonempty train split and at least two test records, got {} and {}",
            train_idx.len(),
            test_idx.len()
        )));
    }
    let opt_cfg = cfg.optimizer();
    let mut opt = AdamW::new(store);
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, "shuffle"));
    let mut history = Vec::with_capacity(2 * cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint<f32>)> = None;
    let test_labels = data.labels(model.cfg.task, &test_idx);

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let loss = train_step(model, store, &mut opt, data, batch, &opt_cfg, epoch)?;
            total += loss * batch.len() as f64;
        }
        store.zero_grad();
        let record = HistoryRecord {
            epoch,
            split: Split::Train,
            loss: total / order.len() as f64,
            srcc: None,
            plcc: None,
        };
        observer(&record);
        history.push(record);

        let preds = predict(model, store, data, &test_idx, cfg.batch_size)?;
        let test_loss = preds.iter().zip(&test_labels).map(|(p, l)| (p - l).powi(2)).sum::<f64>() / preds.len() as f64;
        let corr = match correlations(&preds, &test_labels) {
            Ok(c) => Some(c),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        let record = HistoryRecord {
            epoch,
            split: Split::Test,
            loss: test_loss,
            srcc: corr.map(|c| c.srcc),
            plcc: corr.map(|c| c.plcc),
        };
        observer(&record);
        history.push(record);

        let score = corr.map_or(f64::NEG_INFINITY, |c| c.srcc);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, Checkpoint::capture(store, &opt, epoch as u64, rng.state())));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        last: Checkpoint::capture(store, &opt, cfg.epochs as u64, rng.state()),
        best_epoch,
        best,
    })
}

/// A trained model with its parameters.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub outcome: TrainOutcome,
}

/// Builds a model from `model_cfg` initialized from `cfg.seed` and trains it.
pub fn fit(
    model_cfg: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&HistoryRecord),
) -> Result<Fitted> {
    let mut store = ParamStore::new();
    let model = Model::build(model_cfg, &mut store, cfg.seed)?;
    let outcome = train(&model, &mut store, data, cfg, observer)?;
    Ok(Fitted { model, store, outcome })
}

#[cfg(test)]
mod tests;
