//! Training, evaluation and the ablation suite.

mod config;
mod model;
mod train;

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub use config::{
    DataSource, ModelKind, RunConfig, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, FUSION_LEARNING_RATE,
    FUSION_WEIGHT_DECAY, MAX_FOLDS, UNIMODAL_LEARNING_RATE,
};
pub use model::{export_embeddings, Evaluation, Model, ModelOutput};
pub use train::{
    derive_seed, load_data, train, train_dataset, train_fold, train_with, FoldResult, MeanStd,
    RunResult, Summary,
};

use crate::data::DataError;
use crate::fusion::FusionError;
use crate::metrics::MetricsError;
use crate::par::Execution;
use crate::tensor::{ParamStore, TensorError};

/// Total number of scalar parameters.
pub fn count_params(params: &ParamStore) -> usize {
    params.iter().map(|p| p.value.len()).sum()
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss {loss} in fold {fold}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        fold: usize,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub model: ModelKind,
    pub name: String,
    pub summary: Summary,
    pub param_count: usize,
}

/// One row per configuration in [`ModelKind::ABLATION_ORDER`].
#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, model: ModelKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Fixed-width text table with `mean ± std` cells.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>16} {:>16} {:>16}\n",
            "Model", "F1 Grade IV", "F1-Micro", "F1-Macro"
        );
        for r in &self.rows {
            let cell = |m: MeanStd| format!("{:.3} ± {:.3}", m.mean, m.std);
            let _ = writeln!(
                out,
                "{:<12} {:>16} {:>16} {:>16}",
                r.name,
                cell(r.summary.f1_grade_iv),
                cell(r.summary.f1_micro),
                cell(r.summary.f1_macro)
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String, RunError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,f1_grade_iv_mean,f1_grade_iv_std,f1_micro_mean,f1_micro_std,\
             f1_macro_mean,f1_macro_std,param_count\n",
        );
        for r in &self.rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.model.cli_name(),
                s.f1_grade_iv.mean,
                s.f1_grade_iv.std,
                s.f1_micro.mean,
                s.f1_micro.std,
                s.f1_macro.mean,
                s.f1_macro.std,
                r.param_count
            );
        }
        out
    }
}

/// Runs `base` once per model configuration with every other setting
/// (data, folds, seed, epochs) held fixed. Cells run through `exec`.
pub fn run_ablation_suite(base: &RunConfig, exec: Execution) -> Result<AblationTable, RunError> {
    base.validate()?;
    let data = load_data(&base.data)?;
    let runs = exec.map(&ModelKind::ABLATION_ORDER, |&model| {
        // per-model lr/decay defaults apply unless the base pins them
        let cfg = RunConfig {
            model,
            ..base.clone()
        };
        train_dataset(&cfg, &data, exec)
    });
    let mut rows = Vec::with_capacity(runs.len());
    for (model, run) in ModelKind::ABLATION_ORDER.into_iter().zip(runs) {
        let run = run?;
        rows.push(AblationRow {
            model,
            name: model.to_string(),
            summary: run.summary,
            param_count: run.param_count,
        });
    }
    Ok(AblationTable { rows })
}
