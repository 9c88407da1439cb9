use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelKind;
use super::RunError;
use crate::backbones::{ClassifierTail, GenomicMlp, ImageEncoder};
use crate::data::{batches, Batch, Dataset};
use crate::fusion::{FeatureVector, FusionConfig, FusionHead, Modality};
use crate::metrics::{confusion, write_embeddings_csv, EmbeddingRow, MetricsReport};
use crate::par::Execution;
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
enum Head {
    Fusion(FusionHead),
    Unimodal(ClassifierTail),
}

/// Backbones plus head, with all parameters in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    kind: ModelKind,
    head_hidden: usize,
    store: ParamStore,
    image: Option<ImageEncoder>,
    genes: Option<GenomicMlp>,
    head: Head,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub logits: Var,
    pub embedding: Var,
}

/// Predictions and penultimate activations for a dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub embeddings: Vec<EmbeddingRow>,
    pub report: MetricsReport,
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    kind: ModelKind,
    head_hidden: usize,
    params: BTreeMap<String, SavedParam>,
}

impl Model {
    /// Freshly initialized model; parameters depend only on `seed`.
    pub fn new(kind: ModelKind, head_hidden: usize, seed: u64) -> Result<Self, RunError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let uses_image = kind != ModelKind::GeneOnly;
        let uses_genes = kind != ModelKind::ImgOnly;
        let image = if uses_image {
            Some(ImageEncoder::new(&mut store, "image", &mut rng)?)
        } else {
            None
        };
        let genes = if uses_genes {
            Some(GenomicMlp::new(&mut store, "mlp", &mut rng)?)
        } else {
            None
        };
        let head = match kind.fusion_variant() {
            Some(variant) => {
                let cfg = FusionConfig {
                    hidden: head_hidden,
                    ..FusionConfig::new(variant)
                };
                Head::Fusion(FusionHead::new(cfg, &mut store, "fusion", &mut rng)?)
            }
            None => Head::Unimodal(ClassifierTail::new(&mut store, "tail", &mut rng)?),
        };
        Ok(Self {
            kind,
            head_hidden,
            store,
            image,
            genes,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.num_elements()
    }

    /// Parameters of the fusion head alone (zero for unimodal models).
    pub fn head_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|p| p.name.starts_with("fusion."))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn fusion_head(&self) -> Option<&FusionHead> {
        match &self.head {
            Head::Fusion(h) => Some(h),
            Head::Unimodal(_) => None,
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: Var,
        genes: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<ModelOutput, RunError> {
        let a = match &self.image {
            Some(enc) => Some(enc.embed(g, p, images)?),
            None => None,
        };
        let b = match &self.genes {
            Some(mlp) => Some(mlp.embed(g, p, genes, training, rng)?),
            None => None,
        };
        match &self.head {
            Head::Fusion(head) => {
                let a = FeatureVector::new(g, a.expect("fusion uses images"), Modality::Image)?;
                let b = FeatureVector::new(g, b.expect("fusion uses genes"), Modality::Genes)?;
                let out = head.forward(g, p, &a, &b, training, rng)?;
                Ok(ModelOutput {
                    logits: out.logits,
                    embedding: out.embedding,
                })
            }
            Head::Unimodal(tail) => {
                let embedding = a.or(b).expect("one backbone present");
                let logits = tail.logits(g, p, embedding, training, rng)?;
                Ok(ModelOutput { logits, embedding })
            }
        }
    }

    /// Eval-mode forward pass on one batch: `(predicted class, embedding)`
    /// per sample.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<(usize, Vec<f64>)>, RunError> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let images = g.constant(batch.images.clone());
        let genes = g.constant(batch.genes.clone());
        // eval mode draws no random numbers
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &p, images, genes, false, &mut rng)?;
        let logits = g.value(out.logits);
        let classes = logits.shape()[1];
        let emb = g.value(out.embedding);
        let dim = emb.shape()[1];
        Ok(logits
            .data()
            .chunks(classes)
            .zip(emb.data().chunks(dim))
            .map(|(row, e)| (argmax(row), e.to_vec()))
            .collect())
    }

    /// Predicts every sample of `data` (batches evaluated via `exec`) and
    /// scores the predictions.
    pub fn evaluate(
        &self,
        data: &Dataset,
        batch_size: usize,
        exec: Execution,
    ) -> Result<Evaluation, RunError> {
        let all: Vec<Batch> = batches(data, batch_size, false, 0).collect();
        let per_batch = exec.map(&all, |b| self.predict(b));
        let mut predictions = Vec::with_capacity(data.len());
        let mut embeddings = Vec::with_capacity(data.len());
        for (batch, out) in all.iter().zip(per_batch) {
            for ((id, &label), (pred, emb)) in batch.ids.iter().zip(&batch.labels).zip(out?) {
                predictions.push(pred);
                embeddings.push(EmbeddingRow {
                    sample_id: id.clone(),
                    grade: label,
                    values: emb,
                });
            }
        }
        let cm = confusion(&predictions, &data.labels())?;
        Ok(Evaluation {
            predictions,
            embeddings,
            report: MetricsReport::from_confusion(&cm)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let saved = SavedModel {
            kind: self.kind,
            head_hidden: self.head_hidden,
            params: self
                .store
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        SavedParam {
                            shape: p.value.shape().to_vec(),
                            data: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        let json = serde_json::to_string(&saved)?;
        std::fs::write(path, json).map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|source| RunError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let saved: SavedModel = serde_json::from_str(&text)?;
        let mut model = Model::new(saved.kind, saved.head_hidden, 0)?;
        if saved.params.len() != model.store.len() {
            return Err(RunError::Config(format!(
                "{}: expected {} parameters, found {}",
                path.display(),
                model.store.len(),
                saved.params.len()
            )));
        }
        for (name, p) in saved.params {
            let id = model.store.id(&name).ok_or_else(|| {
                RunError::Config(format!("{}: unknown parameter {name}", path.display()))
            })?;
            model.store.set(id, Tensor::new(&p.shape, p.data)?)?;
        }
        Ok(model)
    }
}

/// Writes the eval-mode penultimate activations of `data` to `path` as
/// `sample_id,grade,e0..`, and returns the evaluation they came from.
pub fn export_embeddings(model: &Model, data: &Dataset, path: &Path) -> Result<Evaluation, RunError> {
    let eval = model.evaluate(data, 64, Execution::default())?;
    write_embeddings_csv(&eval.embeddings, path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(eval)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorSpec};

    #[test]
    fn argmax_picks_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[2.0, -1.0, 0.0]), 0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(ModelKind::Moab, 64, 42).unwrap();
        let b = Model::new(ModelKind::Moab, 64, 42).unwrap();
        let c = Model::new(ModelKind::Moab, 64, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = Model::new(ModelKind::Dbf, 16, 3).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.kind(), ModelKind::Dbf);
    }

    #[test]
    fn evaluation_is_deterministic_across_execution_modes() {
        let data = generate(&GeneratorSpec {
            class_counts: [6, 6, 7],
            ..GeneratorSpec::default()
        })
        .unwrap();
        let m = Model::new(ModelKind::Moab, 64, 1).unwrap();
        let seq = m.evaluate(&data, 4, Execution::Sequential).unwrap();
        let par = m.evaluate(&data, 4, Execution::Parallel).unwrap();
        assert_eq!(seq.predictions, par.predictions);
        assert_eq!(seq.embeddings, par.embeddings);
        assert_eq!(seq.embeddings.len(), 19);
        assert_eq!(seq.embeddings[0].values.len(), 64);
    }
}
