//! Depthwise-separable audio tagging models on a small CPU tensor engine:
//! layers with hand-written gradients, log-mel frontend, augmentation,
//! checkpoints, metrics, profiling and a toy trainer.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod profiler;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{CheckpointError, Error, Result};
pub use model::{Model, ModelConfig, Prediction};
pub use tensor::{Real, Tensor};
