//! Multi-modal outer arithmetic fusion.
//!
//! Two modality embeddings are combined through four outer operators
//! (addition, subtraction, product, division), stacked as channels and
//! condensed by a 1×1 convolution before a small classifier head. The crate
//! also ships the pieces needed to train and evaluate such models end to
//! end on synthetic data:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, layers and Adam
//! - [`fusion`]: outer operators, the MOAB head and ablation heads
//! - [`backbones`]: genomic MLP and a small image encoder
//! - [`data`]: synthetic generator, splits, file formats and batching
//! - [`metrics`]: confusion matrix, micro/macro F1, embedding export
//! - [`harness`]: run configuration, training loop and ablation suite

pub mod backbones;
pub mod data;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod par;
pub mod tensor;

pub use par::Execution;
