//! Objective metrics over synthesized tokens and aggregation of listening-test
//! ballots.

use thiserror::Error;

use crate::train::TrainError;
use crate::vocab::VocabError;

pub mod ballots;
pub mod metrics;
pub mod monotonic;
pub mod oracle;
pub mod report;

pub use ballots::{ab_aggregate, bws_aggregate, mos_aggregate, BallotKind, BallotSet};
pub use metrics::{decode_content, token_error_rate};
pub use monotonic::{monotonicity_report, MonotonicityReport, MonotonicitySpec};
pub use oracle::{emotion_posterior, estimate_mixture_weights, fit_mixture, slot_histogram, EmotionPosterior};
pub use report::{EvalReport, ReportRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("token error rate is undefined for an empty reference")]
    EmptyReference,
    #[error("no tokens to score")]
    NoEvidence,
    #[error("no data: {0}")]
    NoData(String),
    #[error("ballot schema error at record {record}: {message}")]
    Schema { record: usize, message: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
