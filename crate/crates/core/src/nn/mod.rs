//! Minimal differentiable building blocks: tensors, a fixed layer vocabulary
//! with hand-written backward passes, losses, momentum SGD, finite-difference
//! gradient checking and checkpoint files.

mod checkpoint;
pub mod gemm;
pub mod gradcheck;
mod layer;
pub mod loss;
mod ops;
mod optim;
mod tensor;

pub use checkpoint::{BlockEntry, Checkpoint, Manifest, NetworkEntry, BLOB_FILE, FORMAT, MANIFEST_FILE};
pub use gradcheck::{grad_check, BlockReport, GradCheckConfig, GradCheckReport, GradModel, NetworkProbe};
pub use layer::{sigmoid, Layer, LayerKind, Recorder, Sequential, Trace};
pub use loss::{bbox_loss, bce_loss, contrastive_loss, smooth_l1};
pub use ops::{euclidean, l2_normalize, l2_normalize_backward};
pub use optim::{Sgd, SgdConfig};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape error at layer {index}: {message}")]
    LayerShape { index: usize, message: String },
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite gradient {value} in parameter block {block} (max finite |g| = {max_abs})")]
    NonFiniteGradient { block: usize, value: f64, max_abs: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
