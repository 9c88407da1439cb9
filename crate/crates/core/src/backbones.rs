//! Modality encoders that turn raw inputs into 32-dim embeddings.

use rand::Rng;

use crate::fusion::{EMBED_DIM, NUM_CLASSES};
use crate::tensor::layers::{Conv2d, LayerNorm, Linear};
use crate::tensor::{Bound, Graph, ParamStore, TensorError, Var};

pub const GENE_FEATURES: usize = 80;
pub const IMAGE_SIDE: usize = 32;
pub const BACKBONE_DROPOUT: f64 = 0.2;

/// Output widths of the three FC → ReLU → LayerNorm blocks.
pub const MLP_WIDTHS: [usize; 3] = [80, 40, 32];

fn check_shape(op: &'static str, got: &[usize], expected: &[usize]) -> Result<(), TensorError> {
    if got.len() != expected.len() || got[1..] != expected[1..] {
        return Err(TensorError::Shape {
            op,
            lhs: got.to_vec(),
            rhs: expected.to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct MlpBlock {
    fc: Linear,
    norm: LayerNorm,
    dropout: f64,
}

/// Genomic encoder: `80 → 80 → 40 → 32`, each FC followed by ReLU and layer
/// normalization, with dropout 0.2 after the second and third blocks.
#[derive(Debug, Clone)]
pub struct GenomicMlp {
    blocks: Vec<MlpBlock>,
}

impl GenomicMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let mut blocks = Vec::with_capacity(MLP_WIDTHS.len());
        let mut in_dim = GENE_FEATURES;
        for (k, &out) in MLP_WIDTHS.iter().enumerate() {
            blocks.push(MlpBlock {
                fc: Linear::new(store, &format!("{prefix}.fc{}", k + 1), in_dim, out, 1.0, rng)?,
                norm: LayerNorm::new(store, &format!("{prefix}.norm{}", k + 1), out)?,
                dropout: if k == 0 { 0.0 } else { BACKBONE_DROPOUT },
            });
            in_dim = out;
        }
        Ok(Self { blocks })
    }

    /// `genes` is `[batch, 80]`; returns `[batch, 32]`.
    pub fn embed<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        genes: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        check_shape("mlp_embed", g.shape(genes), &[0, GENE_FEATURES])?;
        let mut h = genes;
        for block in &self.blocks {
            h = block.fc.forward(g, p, h)?;
            h = g.relu(h);
            h = block.norm.forward(g, p, h)?;
            h = g.dropout(h, block.dropout, training, rng)?;
        }
        Ok(h)
    }
}

/// Small convolutional encoder for `1×32×32` images:
/// conv(1→8, 3×3, s2) → ReLU → conv(8→16, 3×3, s2) → ReLU → global average
/// pool → FC(16→32) → layer norm.
///
/// The closing layer norm puts the embedding on the same scale as the
/// genomic one, so neither modality swamps the other inside the outer maps.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    norm: LayerNorm,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let gain = 2f64.sqrt();
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), 1, 8, 3, 2, 1, gain, rng)?,
            conv2: Conv2d::new(store, &format!("{prefix}.conv2"), 8, 16, 3, 2, 1, gain, rng)?,
            fc: Linear::new(store, &format!("{prefix}.fc"), 16, EMBED_DIM, 1.0, rng)?,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), EMBED_DIM)?,
        })
    }

    /// `img` is `[batch, 1, 32, 32]`; returns `[batch, 32]`.
    pub fn embed(&self, g: &mut Graph, p: &Bound, img: Var) -> Result<Var, TensorError> {
        check_shape("image_embed", g.shape(img), &[0, 1, IMAGE_SIDE, IMAGE_SIDE])?;
        let h = self.conv1.forward(g, p, img)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h)?;
        let h = g.relu(h);
        let h = g.global_avg_pool(h)?;
        let h = self.fc.forward(g, p, h)?;
        self.norm.forward(g, p, h)
    }
}

/// Dropout(0.2) then FC(32→3), used by the single-modality baselines.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierTail {
    fc: Linear,
}

impl ClassifierTail {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            fc: Linear::new(store, &format!("{prefix}.fc"), EMBED_DIM, NUM_CLASSES, 1.0, rng)?,
        })
    }

    pub fn linear(&self) -> &Linear {
        &self.fc
    }

    pub fn logits<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        embedding: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let h = g.dropout(embedding, BACKBONE_DROPOUT, training, rng)?;
        self.fc.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_parameter_count_near_eleven_thousand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        GenomicMlp::new(&mut store, "mlp", &mut rng).unwrap();
        // 80*80+80 + 80*40+40 + 40*32+32 + 2*(80+40+32)
        assert_eq!(store.num_elements(), 11_336);
    }

    #[test]
    fn image_encoder_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        ImageEncoder::new(&mut store, "img", &mut rng).unwrap();
        ClassifierTail::new(&mut store, "tail", &mut rng).unwrap();
        assert!(store.num_elements() < 10_000);
    }

    #[test]
    fn shapes_and_width_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = GenomicMlp::new(&mut store, "mlp", &mut rng).unwrap();
        let enc = ImageEncoder::new(&mut store, "img", &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let genes = g.constant(Tensor::zeros(&[4, 80]));
        let e = mlp.embed(&mut g, &p, genes, false, &mut rng).unwrap();
        assert_eq!(g.shape(e), &[4, 32]);
        let img = g.constant(Tensor::zeros(&[3, 1, 32, 32]));
        let e = enc.embed(&mut g, &p, img).unwrap();
        assert_eq!(g.shape(e), &[3, 32]);

        let bad = g.constant(Tensor::zeros(&[4, 79]));
        assert!(mlp.embed(&mut g, &p, bad, false, &mut rng).is_err());
        let bad = g.constant(Tensor::zeros(&[1, 1, 28, 28]));
        assert!(enc.embed(&mut g, &p, bad).is_err());
    }

    #[test]
    fn zero_genes_give_beta_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mlp = GenomicMlp::new(&mut store, "mlp", &mut rng).unwrap();
        let beta = store.id("mlp.norm3.beta").unwrap();
        store.set(beta, Tensor::filled(&[32], 0.25)).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let genes = g.constant(Tensor::zeros(&[2, 80]));
        let e = mlp.embed(&mut g, &p, genes, false, &mut rng).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.25));
    }
}
