//! Outer-arithmetic fusion of two modality embeddings.
//!
//! Each embedding of length `N` is padded with a leading constant (1 for the
//! product and division maps, 0 for addition and subtraction) so that the
//! original vectors survive in row 0 and column 0 of every `(N+1)×(M+1)`
//! outer map. The MOAB head squashes the four maps with a sigmoid, stacks
//! them as channels `A, S, P, D`, condenses them with a learned 1×1
//! convolution and classifies the flattened result with two FC layers.
//!
//! The ablation heads (concatenation, addition-only, dual-branch and the
//! parameter-matched elementwise sum) share the same two-layer classifier.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::layers::Linear;
use crate::tensor::{Bound, Graph, OuterKind, ParamId, ParamStore, Tensor, TensorError, Var};

/// Embedding width produced by both backbones.
pub const EMBED_DIM: usize = 32;
/// Denominator shift of the division map.
pub const DEFAULT_EPSILON_DIV: f64 = 1.2e-20;
pub const DEFAULT_HEAD_HIDDEN: usize = 64;
pub const DEFAULT_HEAD_DROPOUT: f64 = 0.1;
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("{op} expects {expected:?}-padded inputs, got {got:?}")]
    Contract {
        op: &'static str,
        expected: PadKind,
        got: PadKind,
    },
    #[error("expected feature length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Genes,
}

/// A batch of modality embeddings, `[batch, N]`.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVector {
    pub values: Var,
    pub modality: Modality,
}

impl FeatureVector {
    pub fn new(g: &Graph, values: Var, modality: Modality) -> Result<Self, FusionError> {
        let s = g.shape(values);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "FeatureVector",
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }
            .into());
        }
        Ok(Self { values, modality })
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.values)[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadKind {
    One,
    Zero,
}

impl PadKind {
    pub fn value(self) -> f64 {
        match self {
            PadKind::One => 1.0,
            PadKind::Zero => 0.0,
        }
    }
}

/// `[batch, N + 1]` with the pad constant in column 0.
#[derive(Debug, Clone, Copy)]
pub struct PaddedVector {
    pub values: Var,
    pub kind: PadKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Addition,
    Subtraction,
    Product,
    Division,
}

impl Branch {
    /// Channel order of the stacked multi-modal tensor.
    pub const ALL: [Branch; 4] = [
        Branch::Addition,
        Branch::Subtraction,
        Branch::Product,
        Branch::Division,
    ];
}

/// `[batch, N + 1, M + 1]` map produced by one outer operator.
#[derive(Debug, Clone, Copy)]
pub struct OuterMatrix {
    pub values: Var,
    pub branch: Branch,
}

/// Stacked sigmoid maps `M` (`[batch, C, 33, 33]`) and their 1×1-convolved
/// condensation `M*` (`[batch, 1, 33, 33]`).
#[derive(Debug, Clone, Copy)]
pub struct MultiModalTensor {
    pub m: Var,
    pub m_star: Var,
}

pub fn pad(g: &mut Graph, v: &FeatureVector, kind: PadKind) -> Result<PaddedVector, FusionError> {
    Ok(PaddedVector {
        values: g.pad_front(v.values, kind.value())?,
        kind,
    })
}

fn require(op: &'static str, expected: PadKind, vs: [&PaddedVector; 2]) -> Result<(), FusionError> {
    for v in vs {
        if v.kind != expected {
            return Err(FusionError::Contract {
                op,
                expected,
                got: v.kind,
            });
        }
    }
    Ok(())
}

/// `P[i][j] = a1[i] * b1[j]`
pub fn outer_product(
    g: &mut Graph,
    a1: &PaddedVector,
    b1: &PaddedVector,
) -> Result<OuterMatrix, FusionError> {
    require("outer_product", PadKind::One, [a1, b1])?;
    Ok(OuterMatrix {
        values: g.outer(a1.values, b1.values, OuterKind::Mul)?,
        branch: Branch::Product,
    })
}

/// `D[i][j] = a1[i] / (b1[j] + eps)`. The shift is one-sided: denominators
/// just below `-eps` still produce very large magnitudes.
pub fn outer_division(
    g: &mut Graph,
    a1: &PaddedVector,
    b1: &PaddedVector,
    eps: f64,
) -> Result<OuterMatrix, FusionError> {
    require("outer_division", PadKind::One, [a1, b1])?;
    Ok(OuterMatrix {
        values: g.outer(a1.values, b1.values, OuterKind::Div { eps })?,
        branch: Branch::Division,
    })
}

/// `A[i][j] = a0[i] + b0[j]`
pub fn outer_addition(
    g: &mut Graph,
    a0: &PaddedVector,
    b0: &PaddedVector,
) -> Result<OuterMatrix, FusionError> {
    require("outer_addition", PadKind::Zero, [a0, b0])?;
    Ok(OuterMatrix {
        values: g.outer(a0.values, b0.values, OuterKind::Add)?,
        branch: Branch::Addition,
    })
}

/// `S[i][j] = a0[i] - b0[j]`
pub fn outer_subtraction(
    g: &mut Graph,
    a0: &PaddedVector,
    b0: &PaddedVector,
) -> Result<OuterMatrix, FusionError> {
    require("outer_subtraction", PadKind::Zero, [a0, b0])?;
    Ok(OuterMatrix {
        values: g.outer(a0.values, b0.values, OuterKind::Sub)?,
        branch: Branch::Subtraction,
    })
}

/// Computes the requested branch maps, in the given order.
pub fn outer_maps(
    g: &mut Graph,
    a: &FeatureVector,
    b: &FeatureVector,
    branches: &[Branch],
    eps: f64,
) -> Result<Vec<OuterMatrix>, FusionError> {
    let needs_one = branches
        .iter()
        .any(|b| matches!(b, Branch::Product | Branch::Division));
    let needs_zero = branches
        .iter()
        .any(|b| matches!(b, Branch::Addition | Branch::Subtraction));
    let ones = if needs_one {
        Some((pad(g, a, PadKind::One)?, pad(g, b, PadKind::One)?))
    } else {
        None
    };
    let zeros = if needs_zero {
        Some((pad(g, a, PadKind::Zero)?, pad(g, b, PadKind::Zero)?))
    } else {
        None
    };
    branches
        .iter()
        .map(|branch| match branch {
            Branch::Addition => {
                let (a0, b0) = zeros.as_ref().expect("zero-padded pair");
                outer_addition(g, a0, b0)
            }
            Branch::Subtraction => {
                let (a0, b0) = zeros.as_ref().expect("zero-padded pair");
                outer_subtraction(g, a0, b0)
            }
            Branch::Product => {
                let (a1, b1) = ones.as_ref().expect("one-padded pair");
                outer_product(g, a1, b1)
            }
            Branch::Division => {
                let (a1, b1) = ones.as_ref().expect("one-padded pair");
                outer_division(g, a1, b1, eps)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    Moab,
    Concat,
    OafOnly,
    Dbf,
    StdAdd,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::Concat,
        FusionVariant::OafOnly,
        FusionVariant::Dbf,
        FusionVariant::StdAdd,
        FusionVariant::Moab,
    ];

    /// Branches stacked as channels before the 1×1 convolution, if any.
    pub fn channel_branches(self) -> &'static [Branch] {
        match self {
            FusionVariant::Moab => &Branch::ALL,
            FusionVariant::Dbf => &[Branch::Addition, Branch::Product],
            _ => &[],
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Moab => "MOAB",
            FusionVariant::Concat => "Concatenation",
            FusionVariant::OafOnly => "OAF",
            FusionVariant::Dbf => "DBF",
            FusionVariant::StdAdd => "Standard Addition*",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub epsilon_div: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub embed_dim: usize,
}

impl FusionConfig {
    pub fn new(variant: FusionVariant) -> Self {
        Self {
            variant,
            epsilon_div: DEFAULT_EPSILON_DIV,
            hidden: DEFAULT_HEAD_HIDDEN,
            dropout: DEFAULT_HEAD_DROPOUT,
            embed_dim: EMBED_DIM,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.epsilon_div > 0.0) {
            return Err(FusionError::Config(format!(
                "epsilon_div must be positive, got {}",
                self.epsilon_div
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FusionError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(FusionError::Config("hidden and embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Side length of every outer map (`embed_dim + 1`).
    pub fn map_side(&self) -> usize {
        self.embed_dim + 1
    }

    /// Width of the vector entering the first head FC layer.
    pub fn head_input_width(&self) -> usize {
        match self.variant {
            FusionVariant::Concat => 2 * self.embed_dim,
            FusionVariant::StdAdd => self.std_add_expansion_width(),
            _ => self.map_side() * self.map_side(),
        }
    }

    /// Width a plain flatten-and-concatenate of all four maps would need.
    pub fn naive_concat_width(&self) -> usize {
        Branch::ALL.len() * self.map_side() * self.map_side()
    }

    /// Width of the elementwise-sum expansion layer chosen so that the
    /// widened head has about as many parameters as the addition-only head:
    /// `(e + 1) w + (w + 1) h ≈ (s² + 1) h`.
    pub fn std_add_expansion_width(&self) -> usize {
        let side_sq = (self.map_side() * self.map_side()) as f64;
        let h = self.hidden as f64;
        let w = side_sq * h / (self.embed_dim as f64 + 1.0 + h);
        w.round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct ChannelFusion {
    weight: ParamId,
    bias: ParamId,
}

/// Output of any fusion head.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `[batch, 3]`
    pub logits: Var,
    /// Penultimate activation, `[batch, hidden]`.
    pub embedding: Var,
    pub multimodal: Option<MultiModalTensor>,
}

/// Trainable fusion head for one [`FusionVariant`].
#[derive(Debug, Clone)]
pub struct FusionHead {
    config: FusionConfig,
    channel_fusion: Option<ChannelFusion>,
    expand: Option<Linear>,
    fc1: Linear,
    fc2: Linear,
}

impl FusionHead {
    /// Registers the head's parameters under `prefix`. FC weights are
    /// orthogonal with gain 1; the 1×1 convolution starts near the channel
    /// mean (`1/C` plus N(0, 0.01²) noise).
    pub fn new<R: Rng + ?Sized>(
        config: FusionConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self, FusionError> {
        config.validate()?;
        let branches = config.variant.channel_branches();
        let channel_fusion = if branches.is_empty() {
            None
        } else {
            let c = branches.len();
            let noise = Normal::new(0.0, 0.01).expect("valid normal");
            let w: Vec<f64> = (0..c).map(|_| 1.0 / c as f64 + noise.sample(rng)).collect();
            Some(ChannelFusion {
                weight: store.add(format!("{prefix}.conv.weight"), Tensor::new(&[1, c], w)?)?,
                bias: store.add(format!("{prefix}.conv.bias"), Tensor::zeros(&[1]))?,
            })
        };
        let expand = if config.variant == FusionVariant::StdAdd {
            Some(Linear::new(
                store,
                &format!("{prefix}.expand"),
                config.embed_dim,
                config.std_add_expansion_width(),
                1.0,
                rng,
            )?)
        } else {
            None
        };
        let fc1 = Linear::new(
            store,
            &format!("{prefix}.fc1"),
            config.head_input_width(),
            config.hidden,
            1.0,
            rng,
        )?;
        let fc2 = Linear::new(
            store,
            &format!("{prefix}.fc2"),
            config.hidden,
            NUM_CLASSES,
            1.0,
            rng,
        )?;
        Ok(Self {
            config,
            channel_fusion,
            expand,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Ids of the 1×1 convolution weight and bias, when the variant has one.
    pub fn channel_fusion_params(&self) -> Option<(ParamId, ParamId)> {
        self.channel_fusion.map(|c| (c.weight, c.bias))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        a: &FeatureVector,
        b: &FeatureVector,
        training: bool,
        rng: &mut R,
    ) -> Result<FusionOutput, FusionError> {
        let cfg = &self.config;
        for v in [a, b] {
            let got = v.dim(g);
            if got != cfg.embed_dim {
                return Err(FusionError::Dimension {
                    expected: cfg.embed_dim,
                    got,
                });
            }
        }
        if g.shape(a.values)[0] != g.shape(b.values)[0] {
            return Err(TensorError::Shape {
                op: "fusion batch",
                lhs: g.shape(a.values).to_vec(),
                rhs: g.shape(b.values).to_vec(),
            }
            .into());
        }

        let mut multimodal = None;
        let features = match cfg.variant {
            FusionVariant::Moab | FusionVariant::Dbf => {
                let maps = outer_maps(g, a, b, cfg.variant.channel_branches(), cfg.epsilon_div)?;
                let squashed: Vec<Var> = maps.iter().map(|m| g.sigmoid(m.values)).collect();
                let m = g.stack_channels(&squashed)?;
                let conv = self.channel_fusion.expect("channel variants own a conv");
                let m_star = g.conv2d_1x1(m, p.var(conv.weight), p.var(conv.bias))?;
                multimodal = Some(MultiModalTensor { m, m_star });
                g.flatten(m_star)?
            }
            FusionVariant::OafOnly => {
                let maps = outer_maps(g, a, b, &[Branch::Addition], cfg.epsilon_div)?;
                let s = g.sigmoid(maps[0].values);
                g.flatten(s)?
            }
            FusionVariant::Concat => g.concat_cols(a.values, b.values)?,
            FusionVariant::StdAdd => {
                let sum = g.add(a.values, b.values)?;
                let expand = self.expand.expect("std-add owns an expansion layer");
                let h = expand.forward(g, p, sum)?;
                g.sigmoid(h)
            }
        };
        let h = self.fc1.forward(g, p, features)?;
        let embedding = g.relu(h);
        let dropped = g.dropout(embedding, cfg.dropout, training, rng)?;
        let logits = self.fc2.forward(g, p, dropped)?;
        Ok(FusionOutput {
            logits,
            embedding,
            multimodal,
        })
    }
}
