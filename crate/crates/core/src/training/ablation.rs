use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fit, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AblationVariant, ModelConfig, Task};

/// One row of the ablation table: a variant and a query count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub setting: String,
    pub variant: AblationVariant,
    pub queries: usize,
}

/// Rows for `task` in table order. The query-count rows hold the full model
/// at 4 and 8 queries; one of them repeats the default.
pub fn ablation_rows(task: Task) -> Vec<AblationSetting> {
    let default_q = task.block_kind().default_queries();
    let row = |variant: AblationVariant, queries: usize, setting: String| AblationSetting {
        setting,
        variant,
        queries,
    };
    let mut rows: Vec<AblationSetting> = AblationVariant::ALL
        .iter()
        .filter(|v| **v != AblationVariant::Full && v.valid_for(task))
        .map(|&v| row(v, default_q, v.name().to_owned()))
        .collect();
    rows.push(row(AblationVariant::Full, default_q, "full".into()));
    for q in [4, 8] {
        rows.push(row(AblationVariant::Full, q, format!("queries_{q}")));
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: Task,
    #[serde(flatten)]
    pub setting: AblationSetting,
    /// Final-epoch test correlations; `None` when undefined.
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting.setting == setting)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.into(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }
}

/// Trains every setting in `settings` from the same seed on `data`.
/// Settings that resolve to the same model are trained once.
pub fn ablate(
    data: &Dataset,
    base: &ModelConfig,
    cfg: &TrainConfig,
    settings: &[AblationSetting],
    progress: &mut dyn FnMut(&AblationRow),
) -> Result<AblationReport> {
    let configs: Vec<ModelConfig> = settings
        .iter()
        .map(|s| {
            let mut m = base.clone();
            m.variant = s.variant;
            m.queries = Some(s.queries);
            m.validate().map(|_| m)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<AblationRow> = Vec::with_capacity(settings.len());
    for (i, (setting, model_cfg)) in settings.iter().zip(&configs).enumerate() {
        let (srcc, plcc) = match configs[..i].iter().position(|c| c == model_cfg) {
            Some(j) => (rows[j].srcc, rows[j].plcc),
            None => {
                let fitted = fit(model_cfg, data, cfg, &mut |_| {})?;
                let last = fitted.outcome.final_test();
                (last.srcc, last.plcc)
            }
        };
        let row = AblationRow {
            task: base.task,
            setting: setting.clone(),
            srcc,
            plcc,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(AblationReport { rows })
}
