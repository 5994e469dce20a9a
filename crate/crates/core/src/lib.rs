//! Sparse training with sensitivity-gated weight decay and loss-bounded
//! magnitude pruning.
//!
//! The crate is self-contained: a small f64 tensor type, a tape-based
//! reverse-mode autodiff, LeNet-style models, the regularised SGD update,
//! the pruning threshold search and the trainer that alternates the two.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod prune;
pub mod reg;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
pub use model::{build_lenet300, build_lenet5, build_mlp, Evaluation, LayerSpec, Model};
pub use reg::{RegularizerConfig, Variant};
pub use tensor::Tensor;
pub use train::{train, RunResult, Splits, TrainConfig};
