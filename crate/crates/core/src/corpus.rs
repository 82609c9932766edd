//! Synthetic emotion-styled corpus.
//!
//! Each content symbol is voiced as `frame_rate` speech tokens. A token's
//! style slot is drawn from the emotion mixture over [`StyleModel`] rows, so
//! the content channel is exactly recoverable and the emotion channel has a
//! closed-form likelihood.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{one_hot_weights, Emotion, EmotionWeights, Gender, PromptError, TrainingSample};
use crate::vocab::{TokenId, VocabError, Vocabulary};

pub const DEFAULT_FRAME_RATE: usize = 2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid style model: {0}")]
    Style(String),
    #[error("invalid corpus arguments: {0}")]
    Arguments(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("range error at line {line}: {message}")]
    Range { line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `p(slot | emotion)`, one row per emotion in [`Emotion::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleModel {
    pub slot_dist: Vec<Vec<f64>>,
}

impl Default for StyleModel {
    fn default() -> Self {
        Self::peaked(8, 0.58).expect("default style table is valid")
    }
}

impl StyleModel {
    /// Row `e` puts `peak` on slot `e` and spreads the rest evenly.
    pub fn peaked(slots: usize, peak: f64) -> Result<Self, CorpusError> {
        if slots < Emotion::ALL.len() || !(0.0..=1.0).contains(&peak) {
            return Err(CorpusError::Style(format!(
                "need at least 5 slots and a peak in [0, 1], got {slots} slots, peak {peak}"
            )));
        }
        let rest = (1.0 - peak) / (slots - 1) as f64;
        let slot_dist = (0..Emotion::ALL.len())
            .map(|e| (0..slots).map(|s| if s == e { peak } else { rest }).collect())
            .collect();
        Self::new(slot_dist)
    }

    pub fn new(slot_dist: Vec<Vec<f64>>) -> Result<Self, CorpusError> {
        if slot_dist.len() != Emotion::ALL.len() {
            return Err(CorpusError::Style(format!(
                "expected 5 rows, got {}",
                slot_dist.len()
            )));
        }
        let slots = slot_dist[0].len();
        for (e, row) in slot_dist.iter().enumerate() {
            if row.len() != slots {
                return Err(CorpusError::Style(format!("row {e} has {} slots", row.len())));
            }
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(CorpusError::Style(format!("row {e} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CorpusError::Style(format!("row {e} sums to {sum}")));
            }
        }
        Ok(Self { slot_dist })
    }

    pub fn slots(&self) -> usize {
        self.slot_dist[0].len()
    }

    pub fn row(&self, e: Emotion) -> &[f64] {
        &self.slot_dist[e.index()]
    }

    /// Slot distribution for `weights`: the weight-normalized convex
    /// combination of the pure rows.
    pub fn mixture(&self, weights: &EmotionWeights) -> Result<Vec<f64>, CorpusError> {
        let w = weights.normalized()?;
        let mut out = vec![0.0; self.slots()];
        for (row, &we) in self.slot_dist.iter().zip(&w) {
            for (o, &p) in out.iter_mut().zip(row) {
                *o += we * p;
            }
        }
        Ok(out)
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Voices `content` (text token ids) under `weights`. Deterministic in `seed`.
pub fn generate_utterance(
    vocab: &Vocabulary,
    content: &[TokenId],
    weights: &EmotionWeights,
    style: &StyleModel,
    frame_rate: usize,
    seed: u64,
) -> Result<Vec<TokenId>, CorpusError> {
    if style.slots() != vocab.style_slots() {
        return Err(CorpusError::Style(format!(
            "style model has {} slots, vocabulary has {}",
            style.slots(),
            vocab.style_slots()
        )));
    }
    let mix = style.mixture(weights)?;
    let dist = WeightedIndex::new(&mix).map_err(|e| CorpusError::Style(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(content.len() * frame_rate);
    for &id in content {
        let c = vocab.text_content(id)?;
        for _ in 0..frame_rate {
            out.push(vocab.speech_id(c, dist.sample(&mut rng)));
        }
    }
    Ok(out)
}

/// One utterance. `emotion` is absent only for mixture records, which then
/// carry explicit `weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub emotion: Option<Emotion>,
    pub gender: Gender,
    pub speech_ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<EmotionWeights>,
}

impl CorpusRecord {
    pub fn prompt_weights(&self) -> Result<EmotionWeights, PromptError> {
        match (self.weights, self.emotion) {
            (Some(w), _) => Ok(w),
            (None, Some(e)) => Ok(one_hot_weights(e)),
            (None, None) => Err(PromptError::InvalidWeights(format!(
                "record {} has neither an emotion nor weights",
                self.id
            ))),
        }
    }

    pub fn to_sample(&self, vocab: &Vocabulary) -> Result<TrainingSample, CorpusError> {
        let sample = TrainingSample {
            id: self.id.clone(),
            weights: self.prompt_weights()?,
            gender: self.gender,
            text_ids: vocab.tokenize_text(&self.text)?,
            speech_ids: self.speech_ids.clone(),
            emotion_label: self.emotion,
        };
        sample.check()?;
        Ok(sample)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<CorpusRecord>,
}

/// Utterance ids per partition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub per_emotion: usize,
    pub speakers: Vec<Gender>,
    pub frame_rate: usize,
    pub min_text_len: usize,
    pub max_text_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            per_emotion: 350,
            speakers: vec![Gender::Woman, Gender::Man],
            frame_rate: DEFAULT_FRAME_RATE,
            min_text_len: 6,
            max_text_len: 16,
            seed: 0,
        }
    }
}

/// Held-out counts per (speaker, emotion): 20 test and 30 validation at 350
/// utterances, scaled down proportionally for smaller corpora.
pub fn held_out_counts(per_emotion: usize) -> (usize, usize) {
    let test = (per_emotion * 20 / 350).min(20);
    let validation = (per_emotion * 30 / 350).min(30);
    (validation, test)
}

pub fn make_corpus(
    vocab: &Vocabulary,
    style: &StyleModel,
    config: &CorpusConfig,
) -> Result<(CorpusManifest, DataSplit), CorpusError> {
    if config.per_emotion == 0 {
        return Err(CorpusError::Arguments("per_emotion must be at least 1".into()));
    }
    if config.speakers.is_empty() {
        return Err(CorpusError::Arguments("at least one speaker is required".into()));
    }
    if config.frame_rate == 0 || config.min_text_len == 0 || config.min_text_len > config.max_text_len
    {
        return Err(CorpusError::Arguments(
            "frame rate and text lengths must be positive with min <= max".into(),
        ));
    }
    let (n_val, n_test) = held_out_counts(config.per_emotion);
    let mut manifest = CorpusManifest::default();
    let mut split = DataSplit::default();
    let mut stream = 0u64;
    for (spk, &gender) in config.speakers.iter().enumerate() {
        for emotion in Emotion::ALL {
            let weights = one_hot_weights(emotion);
            for i in 0..config.per_emotion {
                let id = format!("spk{spk}_{emotion}_{i:04}");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream));
                stream += 1;
                let len = rng.gen_range(config.min_text_len..=config.max_text_len);
                let alphabet = vocab.alphabet();
                let text: String = (0..len)
                    .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                    .collect();
                let content = vocab.tokenize_text(&text)?;
                let speech_ids =
                    generate_utterance(vocab, &content, &weights, style, config.frame_rate, rng.gen())?;
                let part = if i >= config.per_emotion - n_test {
                    &mut split.test
                } else if i >= config.per_emotion - n_test - n_val {
                    &mut split.validation
                } else {
                    &mut split.train
                };
                part.push(id.clone());
                manifest.records.push(CorpusRecord {
                    id,
                    text,
                    emotion: Some(emotion),
                    gender,
                    speech_ids,
                    weights: None,
                });
            }
        }
    }
    Ok((manifest, split))
}

impl CorpusManifest {
    pub fn get(&self, id: &str) -> Option<&CorpusRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records whose ids are listed, in list order. Unknown ids are skipped.
    pub fn select(&self, ids: &[String]) -> Vec<&CorpusRecord> {
        let index: std::collections::HashMap<&str, &CorpusRecord> =
            self.records.iter().map(|r| (r.id.as_str(), r)).collect();
        ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }
}

/// Reads and validates a JSON-lines manifest. Blank lines are ignored.
pub fn load_manifest(
    path: &Path,
    vocab: &Vocabulary,
    frame_rate: usize,
) -> Result<CorpusManifest, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_record(&record, vocab, frame_rate, line_no)?;
        records.push(record);
    }
    Ok(CorpusManifest { records })
}

fn validate_record(
    r: &CorpusRecord,
    vocab: &Vocabulary,
    frame_rate: usize,
    line: usize,
) -> Result<(), CorpusError> {
    let schema = |message: String| CorpusError::Schema { line, message };
    let range = |message: String| CorpusError::Range { line, message };
    let weights = r.prompt_weights().map_err(|e| schema(e.to_string()))?;
    weights.validate().map_err(|e| range(e.to_string()))?;
    if let (Some(e), Some(w)) = (r.emotion, r.weights) {
        if w != one_hot_weights(e) {
            return Err(schema(format!("emotion {e} contradicts weights {:?}", w.percents())));
        }
    }
    let text = vocab.tokenize_text(&r.text).map_err(|e| range(e.to_string()))?;
    if let Some(&bad) = r.speech_ids.iter().find(|&&id| !vocab.is_speech(id)) {
        let sr = vocab.speech_range();
        return Err(range(format!(
            "speech id {bad} outside [{}, {})",
            sr.start, sr.end
        )));
    }
    if r.speech_ids.len() != frame_rate * text.len() {
        return Err(range(format!(
            "{} speech ids for {} text symbols at frame rate {frame_rate}",
            r.speech_ids.len(),
            text.len()
        )));
    }
    Ok(())
}

impl DataSplit {
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Schema {
            line: e.line(),
            message: e.to_string(),
        })
    }
}
