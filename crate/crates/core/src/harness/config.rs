use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::data::{GeneratorSpec, SplitSpec};
use crate::fusion::{FusionVariant, DEFAULT_HEAD_HIDDEN};

pub const UNIMODAL_LEARNING_RATE: f64 = 0.001;
pub const FUSION_LEARNING_RATE: f64 = 0.005;
pub const FUSION_WEIGHT_DECAY: f64 = 0.0005;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const MAX_FOLDS: usize = 15;

/// Every trainable configuration: five fusion heads and two single-modality
/// baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Moab,
    Concat,
    Oaf,
    Dbf,
    StdAdd,
    ImgOnly,
    GeneOnly,
}

impl ModelKind {
    /// Row order of the ablation table.
    pub const ABLATION_ORDER: [ModelKind; 7] = [
        ModelKind::ImgOnly,
        ModelKind::GeneOnly,
        ModelKind::Concat,
        ModelKind::Oaf,
        ModelKind::Dbf,
        ModelKind::StdAdd,
        ModelKind::Moab,
    ];

    pub fn fusion_variant(self) -> Option<FusionVariant> {
        match self {
            ModelKind::Moab => Some(FusionVariant::Moab),
            ModelKind::Concat => Some(FusionVariant::Concat),
            ModelKind::Oaf => Some(FusionVariant::OafOnly),
            ModelKind::Dbf => Some(FusionVariant::Dbf),
            ModelKind::StdAdd => Some(FusionVariant::StdAdd),
            ModelKind::ImgOnly | ModelKind::GeneOnly => None,
        }
    }

    pub fn is_fusion(self) -> bool {
        self.fusion_variant().is_some()
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            ModelKind::Moab => "moab",
            ModelKind::Concat => "concat",
            ModelKind::Oaf => "oaf",
            ModelKind::Dbf => "dbf",
            ModelKind::StdAdd => "std-add",
            ModelKind::ImgOnly => "img-only",
            ModelKind::GeneOnly => "gene-only",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<Self> {
        Self::ABLATION_ORDER
            .into_iter()
            .find(|k| k.cli_name() == name)
    }

    pub fn default_learning_rate(self) -> f64 {
        if self.is_fusion() {
            FUSION_LEARNING_RATE
        } else {
            UNIMODAL_LEARNING_RATE
        }
    }

    pub fn default_weight_decay(self) -> f64 {
        if self.is_fusion() {
            FUSION_WEIGHT_DECAY
        } else {
            0.0
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.fusion_variant() {
            Some(v) => v.fmt(f),
            None if *self == ModelKind::ImgOnly => f.write_str("CNN (Image)"),
            None => f.write_str("MLP (Genes)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Csv(PathBuf),
    Generate(GeneratorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks the per-model default (0.005 fusion, 0.001 unimodal).
    pub learning_rate: Option<f64>,
    /// `None` picks the per-model default (0.0005 fusion, 0 unimodal).
    pub weight_decay: Option<f64>,
    pub seed: u64,
    pub data: DataSource,
    pub folds: usize,
    pub test_fraction: f64,
    pub replicas: usize,
    pub replica_noise: f64,
    pub head_hidden: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let split = SplitSpec::default();
        Self {
            model: ModelKind::Moab,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: None,
            weight_decay: None,
            seed: 0,
            data: DataSource::Generate(GeneratorSpec {
                class_counts: GeneratorSpec::proportional_counts(750),
                ..GeneratorSpec::default()
            }),
            folds: 1,
            test_fraction: split.test_fraction,
            replicas: split.replicas,
            replica_noise: split.replica_noise,
            head_hidden: DEFAULT_HEAD_HIDDEN,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.model.default_learning_rate())
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
            .unwrap_or_else(|| self.model.default_weight_decay())
    }

    /// Copy with the per-model defaults filled in.
    pub fn resolved(&self) -> Self {
        Self {
            learning_rate: Some(self.learning_rate()),
            weight_decay: Some(self.weight_decay()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {lr}"));
        }
        let wd = self.weight_decay();
        if !(wd >= 0.0 && wd.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {wd}"));
        }
        if self.folds == 0 || self.folds > MAX_FOLDS {
            return bad(format!("folds must lie in 1..={MAX_FOLDS}, got {}", self.folds));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1".into());
        }
        if !(self.replica_noise >= 0.0) {
            return bad(format!("replica_noise must be >= 0, got {}", self.replica_noise));
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be at least 1".into());
        }
        if let DataSource::Generate(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, RunError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            test_fraction: self.test_fraction,
            replicas: self.replicas,
            replica_noise: self.replica_noise,
            seed,
        }
    }
}
