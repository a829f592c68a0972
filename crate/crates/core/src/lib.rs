//! Structured pruning and distillation for hybrid Mamba2 / attention / MLP
//! language models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod importance;
pub mod model;
pub mod pruner;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{HybridModel, LayerKind, ModelConfig};
pub use tensor::Tensor;
