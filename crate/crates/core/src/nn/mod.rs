//! Minimal neural-network toolkit: the four layers of the regressor with
//! exact backward passes, MSE and softmax cross-entropy losses, Adam, a
//! finite-difference gradient checker and the binary checkpoint format.

use thiserror::Error;

mod adam;
mod checkpoint;
mod gradcheck;
pub mod layers;
mod loss;
mod model;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{max_pool_backward, max_pool_forward, BiLstmLayer, Conv1dLayer, DenseLayer, LstmDirection};
pub use loss::{mse_loss, softmax_cross_entropy};
pub use model::{BackwardFault, ForwardCache, Gradients, ModelConfig, RegressorModel, EMBEDDING_DIM};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("non-finite loss while probing {tensor}[{index}]")]
    NonFiniteProbe { tensor: &'static str, index: usize },
    #[error("invalid gradient check options: {0}")]
    GradCheckOptions(String),
    #[error("checkpoint: bad magic {found:?}, expected \"OVHR\"")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint: unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint: truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
