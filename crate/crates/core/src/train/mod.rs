//! Training loop and mixed-emotion synthesis.

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::model::ModelError;
use crate::prompt::{LayoutError, PromptError};
use crate::vocab::VocabError;

pub mod batch;
pub mod synth;
pub mod trainer;

pub use batch::batch_plan;
pub use synth::{mixing_grid, synthesize, SamplingMode, SamplingParams, SynthOutput, SynthRecord};
pub use trainer::{train, LogRow, PreparedSample, TrainOutcome, TrainRunConfig, Trainer, TrainingLog};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sample {id} has {len} tokens, over the budget of {budget}")]
    SampleTooLong { id: String, len: usize, budget: usize },
    #[error("training sample {id} has a mixed prompt {weights:?}; only single-emotion prompts may be trained on")]
    ZeroShotContamination { id: String, weights: [u32; 5] },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}
