use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{Conditioning, IncrementalDecoder, ModelCheckpoint};
use crate::prompt::{render_prompt, Emotion, EmotionWeights, Gender, PromptEncoding};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Greedy,
    TopK,
}

impl FromStr for SamplingMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "top_k" | "top-k" => Ok(Self::TopK),
            _ => Err(TrainError::Config(format!("unknown sampling mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub mode: SamplingMode,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            mode: SamplingMode::TopK,
            k: 5,
            temperature: 1.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 || !(self.temperature > 0.0 && self.temperature.is_finite()) || self.max_new_tokens == 0 {
            return Err(TrainError::Config(format!(
                "sampling needs k >= 1, temperature > 0 and max_new_tokens >= 1 (got k={}, temperature={}, max_new_tokens={})",
                self.k, self.temperature, self.max_new_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub speech_ids: Vec<TokenId>,
    /// `<E>` was not produced within the token budget.
    pub truncated: bool,
}

/// One line of a synthesis batch file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub weights: EmotionWeights,
    pub gender: Gender,
    pub text: String,
    pub speech_ids: Vec<TokenId>,
    pub truncated: bool,
}

/// `primary` at 100, `secondary` at each level, everything else 0.
pub fn mixing_grid(primary: Emotion, secondary: Emotion, levels: &[u32]) -> Result<Vec<EmotionWeights>, TrainError> {
    if primary == secondary {
        return Err(TrainError::Config(format!(
            "primary and secondary emotion are both {primary}"
        )));
    }
    levels
        .iter()
        .map(|&level| {
            let mut w = [0u32; 5];
            w[primary.index()] = 100;
            w[secondary.index()] = level;
            Ok(EmotionWeights::new(w)?)
        })
        .collect()
}

/// Picks the next token from `logits` restricted to the ids accepted by
/// `allowed`, or `None` when nothing is allowed.
fn pick(logits: &[f32], allowed: impl Fn(usize) -> bool, params: &SamplingParams, rng: &mut ChaCha8Rng) -> Option<usize> {
    let mut cand: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(i, &l)| (i, l as f64))
        .collect();
    if cand.is_empty() {
        return None;
    }
    // stable sort keeps the lower id first on exact ties
    cand.sort_by(|a, b| b.1.total_cmp(&a.1));
    if params.mode == SamplingMode::Greedy {
        return Some(cand[0].0);
    }
    cand.truncate(params.k);
    let top = cand[0].1;
    let weights: Vec<f64> = cand.iter().map(|&(_, l)| ((l - top) / params.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&(id, _), w) in cand.iter().zip(&weights) {
        if u < *w {
            return Some(id);
        }
        u -= w;
    }
    Some(cand[cand.len() - 1].0)
}

/// Generates speech tokens for `text` spoken with the given emotion
/// proportions. Any mixture is accepted here, including ones never trained
/// on. A non-speech draw other than `<E>` is redrawn from the speech tokens
/// only.
pub fn synthesize(
    checkpoint: &ModelCheckpoint,
    vocab: &Vocabulary,
    weights: &EmotionWeights,
    gender: Gender,
    text: &str,
    params: &SamplingParams,
) -> Result<SynthOutput, TrainError> {
    params.validate()?;
    weights.validate()?;
    let model = &checkpoint.params;
    let cfg = &model.config;
    if cfg.vocab_size != vocab.size() {
        return Err(TrainError::Config(format!(
            "checkpoint vocabulary size {} does not match {}",
            cfg.vocab_size,
            vocab.size()
        )));
    }
    let text_ids = vocab.tokenize_text(text)?;
    let specials = vocab.specials();
    let (prompt, cond) = match cfg.prompt_encoding {
        PromptEncoding::Text => (vocab.encode_prompt(&render_prompt(weights, gender)?)?, None),
        PromptEncoding::Scalar => (Vec::new(), Some(Conditioning::new(weights, gender))),
    };
    let mut context = prompt;
    context.push(specials.eop);
    context.extend_from_slice(&text_ids);
    context.push(specials.turn);
    if context.len() > cfg.max_sequence_length {
        return Err(TrainError::SampleTooLong {
            id: text.to_string(),
            len: context.len(),
            budget: cfg.max_sequence_length,
        });
    }
    let budget = params.max_new_tokens.min(cfg.max_sequence_length - context.len() + 1);

    let mut dec = IncrementalDecoder::new(model, cond.as_ref())?;
    let mut logits = dec.feed_all(&context)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let speech = vocab.speech_range();
    let eos = specials.eos as usize;
    let is_speech = |i: usize| speech.contains(&(i as TokenId));
    let mut out = Vec::new();
    while out.len() < budget {
        let mut next = pick(&logits, |_| true, params, &mut rng).expect("vocabulary is nonempty");
        if next == eos {
            return Ok(SynthOutput {
                speech_ids: out,
                truncated: false,
            });
        }
        if !is_speech(next) {
            next = pick(&logits, is_speech, params, &mut rng).expect("speech range is nonempty");
        }
        out.push(next as TokenId);
        if out.len() < budget {
            logits = dec.feed(next as TokenId)?;
        }
    }
    Ok(SynthOutput {
        speech_ids: out,
        truncated: true,
    })
}
