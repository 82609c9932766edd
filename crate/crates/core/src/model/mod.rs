//! Miniature autoregressive network over the joint vocabulary, its training
//! objective, optimizer and checkpoint container.

use thiserror::Error;

pub mod checkpoint;
pub mod decode;
pub mod loss;
pub mod optim;
pub mod params;
pub mod real;
pub mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint, TrainingMeta};
pub use decode::IncrementalDecoder;
pub use loss::{pue_loss, pue_loss_grad, teacher_forcing, TargetDistribution};
pub use optim::{Adam, AdamConfig};
pub use params::{ModelConfig, Params, COND_POSITIONS};
pub use real::Real;
pub use transformer::{backward, forward, Conditioning, ForwardPass};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("conditioning error: {0}")]
    Conditioning(String),
    #[error("loss has no supervised positions")]
    NoSupervision,
    #[error("I/O error: {0}")]
    Io(String),
    #[error("checkpoint version mismatch: {0}")]
    Version(String),
    #[error("checkpoint vocabulary hash {found} does not match {expected}")]
    VocabularyMismatch { expected: String, found: String },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}
