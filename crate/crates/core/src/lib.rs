//! Mixed-emotion sequence synthesis from emotion-guided prompts.
//!
//! A model is trained only on single-emotion prompts (one weight at 100,
//! the rest 0) and asked at inference time for arbitrary mixtures. The
//! crate covers prompt construction, a synthetic factored speech-token
//! corpus, a small transformer trained with a label-smoothed KL objective,
//! constrained autoregressive synthesis, and the objective/subjective
//! evaluation statistics used to judge the result.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod prompt;
pub mod train;
pub mod vocab;

pub use prompt::{Emotion, EmotionWeights, Gender, PromptEncoding};
pub use vocab::{TokenId, Vocabulary};
