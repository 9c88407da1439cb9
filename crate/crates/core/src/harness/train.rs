use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{DataSource, RunConfig};
use super::model::Model;
use super::RunError;
use crate::data::{batches, generate, load_csv, split, Dataset};
use crate::metrics::{write_embeddings_csv, EmbeddingRow, MetricsReport};
use crate::par::Execution;
use crate::tensor::{Adam, AdamConfig, Graph};

const STREAM_SPLIT: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

/// Independent seed for `(fold, stream)` derived from the run seed.
pub fn derive_seed(base: u64, fold: usize, stream: u64) -> u64 {
    // splitmix64 finalizer over a packed key
    let mut z = base
        .wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub report: MetricsReport,
    pub embeddings: Vec<EmbeddingRow>,
    pub model: Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub f1_grade_iv: MeanStd,
    pub f1_micro: MeanStd,
    pub f1_macro: MeanStd,
    pub accuracy: MeanStd,
}

impl Summary {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a MetricsReport>) -> Self {
        let reports: Vec<&MetricsReport> = reports.into_iter().collect();
        let col = |f: fn(&MetricsReport) -> f64| {
            MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        Self {
            f1_grade_iv: col(|r| r.f1_grade_iv),
            f1_micro: col(|r| r.f1_micro),
            f1_macro: col(|r| r.f1_macro),
            accuracy: col(|r| r.accuracy),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Configuration with per-model defaults filled in.
    pub config: RunConfig,
    pub folds: Vec<FoldResult>,
    pub summary: Summary,
    pub param_count: usize,
    pub wall_seconds: f64,
}

pub fn load_data(source: &DataSource) -> Result<Dataset, RunError> {
    Ok(match source {
        DataSource::Csv(path) => load_csv(path)?,
        DataSource::Generate(spec) => generate(spec)?,
    })
}

/// Trains and evaluates every fold of `config` with the default execution.
pub fn train(config: &RunConfig) -> Result<RunResult, RunError> {
    train_with(config, Execution::default())
}

pub fn train_with(config: &RunConfig, exec: Execution) -> Result<RunResult, RunError> {
    config.validate()?;
    let start = Instant::now();
    let config = config.resolved();
    let data = load_data(&config.data)?;
    train_on(&config, &data, exec, start)
}

/// Like [`train_with`] but on an already loaded dataset.
pub fn train_dataset(
    config: &RunConfig,
    data: &Dataset,
    exec: Execution,
) -> Result<RunResult, RunError> {
    config.validate()?;
    train_on(&config.resolved(), data, exec, Instant::now())
}

fn train_on(
    config: &RunConfig,
    data: &Dataset,
    exec: Execution,
    start: Instant,
) -> Result<RunResult, RunError> {
    let fold_ids: Vec<usize> = (0..config.folds).collect();
    let folds = exec
        .map(&fold_ids, |&fold| train_fold(config, data, fold, exec))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunResult {
        summary: Summary::from_reports(folds.iter().map(|f| &f.report)),
        param_count: folds[0].model.param_count(),
        config: config.clone(),
        folds,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// One fold: fresh split and initialization, `epochs` passes of Adam, then
/// evaluation on the held-out part. `config` must already be resolved.
pub fn train_fold(
    config: &RunConfig,
    data: &Dataset,
    fold: usize,
    exec: Execution,
) -> Result<FoldResult, RunError> {
    let seed = derive_seed(config.seed, fold, 0);
    let parts = split(data, &config.split_spec(derive_seed(config.seed, fold, STREAM_SPLIT)))?;
    let mut model = Model::new(
        config.model,
        config.head_hidden,
        derive_seed(config.seed, fold, STREAM_INIT),
    )?;
    let mut adam = Adam::new(
        AdamConfig::new(config.learning_rate(), config.weight_decay()),
        model.params(),
    );
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, fold, STREAM_DROPOUT));
    let shuffle_base = derive_seed(config.seed, fold, STREAM_SHUFFLE);

    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        let order_seed = shuffle_base.wrapping_add(epoch as u64);
        for (index, batch) in batches(&parts.train, config.batch_size, true, order_seed).enumerate() {
            let mut g = Graph::new();
            let p = model.params().bind(&mut g);
            let images = g.constant(batch.images.clone());
            let genes = g.constant(batch.genes.clone());
            let out = model.forward(&mut g, &p, images, genes, true, &mut dropout_rng)?;
            let loss = g.cross_entropy(out.logits, &batch.labels)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(RunError::NonFiniteLoss {
                    fold,
                    epoch,
                    batch: index,
                    loss: value,
                });
            }
            g.backward(loss)?;
            model.params_mut().accumulate_grads(&g, &p);
            adam.step(model.params_mut())?;
            total += value * batch.len() as f64;
        }
        loss_curve.push(total / parts.train.len() as f64);
    }

    let eval = model.evaluate(&parts.test, config.batch_size.max(32), exec)?;
    Ok(FoldResult {
        fold,
        seed,
        train_size: parts.train.len(),
        test_size: parts.test.len(),
        loss_curve,
        report: eval.report,
        embeddings: eval.embeddings,
        model,
    })
}

#[derive(Serialize)]
struct FoldMetrics<'a> {
    fold: usize,
    train_size: usize,
    test_size: usize,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    model: String,
    param_count: usize,
    summary: &'a Summary,
    folds: Vec<FoldMetrics<'a>>,
}

#[derive(Serialize)]
struct RunInfo {
    wall_seconds: f64,
    folds: usize,
    parallel: bool,
}

impl RunResult {
    /// Writes `config.json`, `metrics.json`, `loss_curve.csv`,
    /// `embeddings.csv` and `model.json` (both from fold 0) and `run.json`.
    /// Everything except `run.json` is a pure function of the config.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), RunError> {
        let io = |source| RunError::Io {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|source| RunError::Io { path, source })
        };
        write("config.json", self.config.to_json()?)?;
        let metrics = MetricsFile {
            model: self.config.model.cli_name().to_string(),
            param_count: self.param_count,
            summary: &self.summary,
            folds: self
                .folds
                .iter()
                .map(|f| FoldMetrics {
                    fold: f.fold,
                    train_size: f.train_size,
                    test_size: f.test_size,
                    report: &f.report,
                })
                .collect(),
        };
        write("metrics.json", serde_json::to_string_pretty(&metrics)?)?;
        let mut curve = String::from("fold,epoch,loss\n");
        for f in &self.folds {
            for (epoch, loss) in f.loss_curve.iter().enumerate() {
                curve.push_str(&format!("{},{},{}\n", f.fold, epoch + 1, loss));
            }
        }
        write("loss_curve.csv", curve)?;
        let first = &self.folds[0];
        let emb_path = dir.join("embeddings.csv");
        write_embeddings_csv(&first.embeddings, &emb_path)
            .map_err(|source| RunError::Io { path: emb_path, source })?;
        first.model.save(&dir.join("model.json"))?;
        let info = RunInfo {
            wall_seconds: self.wall_seconds,
            folds: self.folds.len(),
            parallel: Execution::parallel_available(),
        };
        write("run.json", serde_json::to_string_pretty(&info)?)?;
        Ok(())
    }
}
