//! Emotion-guided prompts and the training-sample token layout.
//!
//! A prompt states how strongly each of the five base emotions should be
//! expressed, as integer percentages, plus the speaker gender. The canonical
//! rendering is a single ASCII line:
//!
//! ```text
//! prompt   = "A " gender " speaks an utterance with "
//!            pct " percent happy emotion, "
//!            pct " percent sad emotion, "
//!            pct " percent neutral emotion, "
//!            pct " percent angry emotion, and "
//!            pct " percent surprise emotion." ;
//! gender   = "man" | "woman" ;
//! pct      = "0" | nonzero digit { digit } ;   (* value 0..=100, at most 3 digits *)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::TokenId;

/// The five base emotions, in prompt order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Happy,
    Sad,
    Neutral,
    Angry,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; 5] = [
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Neutral,
        Emotion::Angry,
        Emotion::Surprise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Neutral => "neutral",
            Emotion::Angry => "angry",
            Emotion::Surprise => "surprise",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| PromptError::UnknownEmotion(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Man,
    Woman,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Man, Gender::Woman];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Gender::Man => "man",
            Gender::Woman => "woman",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Gender {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "man" => Ok(Gender::Man),
            "woman" => Ok(Gender::Woman),
            _ => Err(PromptError::UnknownGender(s.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("invalid emotion weights: {0}")]
    InvalidWeights(String),
    #[error("prompt parse error at byte {offset}: expected {expected}")]
    Parse { offset: usize, expected: String },
    #[error("prompt uses the scalar encoding and has no text form")]
    NotText,
    #[error("unknown emotion `{0}`")]
    UnknownEmotion(String),
    #[error("unknown gender `{0}`")]
    UnknownGender(String),
}

/// Per-utterance emotion relevance percentages in (happy, sad, neutral,
/// angry, surprise) order. Values need not sum to 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 5]", into = "[u32; 5]")]
pub struct EmotionWeights {
    percents: [u8; 5],
}

impl EmotionWeights {
    pub const MAX: u32 = 100;

    /// Range-checked constructor. An all-zero vector is representable but
    /// rejected by [`EmotionWeights::validate`].
    pub fn new(percents: [u32; 5]) -> Result<Self, PromptError> {
        let mut out = [0u8; 5];
        for (slot, (&p, e)) in out.iter_mut().zip(percents.iter().zip(Emotion::ALL)) {
            if p > Self::MAX {
                return Err(PromptError::InvalidWeights(format!(
                    "{e} weight {p} exceeds {}",
                    Self::MAX
                )));
            }
            *slot = p as u8;
        }
        Ok(Self { percents: out })
    }

    pub fn get(&self, e: Emotion) -> u32 {
        self.percents[e.index()] as u32
    }

    pub fn percents(&self) -> [u32; 5] {
        self.percents.map(u32::from)
    }

    pub fn sum(&self) -> u32 {
        self.percents.iter().map(|&p| p as u32).sum()
    }

    /// Fails when every weight is zero.
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.sum() == 0 {
            return Err(PromptError::InvalidWeights(
                "at least one emotion weight must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The single emotion at 100 with all others 0, if this is such a vector.
    pub fn one_hot_label(&self) -> Option<Emotion> {
        let nonzero: Vec<_> = Emotion::ALL.into_iter().filter(|&e| self.get(e) > 0).collect();
        match nonzero.as_slice() {
            [e] if self.get(*e) == 100 => Some(*e),
            _ => None,
        }
    }

    /// Weights normalized onto the probability simplex.
    pub fn normalized(&self) -> Result<[f64; 5], PromptError> {
        self.validate()?;
        let total = self.sum() as f64;
        Ok(self.percents.map(|p| p as f64 / total))
    }

    /// Weights as fractions of 100, the scale used for scalar conditioning.
    pub fn fractions(&self) -> [f64; 5] {
        self.percents.map(|p| p as f64 / 100.0)
    }
}

impl TryFrom<[u32; 5]> for EmotionWeights {
    type Error = PromptError;

    fn try_from(value: [u32; 5]) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<EmotionWeights> for [u32; 5] {
    fn from(w: EmotionWeights) -> Self {
        w.percents()
    }
}

impl FromStr for EmotionWeights {
    type Err = PromptError;

    /// Parses a comma separated list of five percentages.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<_> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(PromptError::InvalidWeights(format!(
                "expected 5 comma separated values, got {}",
                parts.len()
            )));
        }
        let mut percents = [0u32; 5];
        for (slot, part) in percents.iter_mut().zip(parts) {
            *slot = part
                .parse()
                .map_err(|_| PromptError::InvalidWeights(format!("`{part}` is not a percentage")))?;
        }
        Self::new(percents)
    }
}

/// Training-time weights: the labeled emotion at 100, all others at 0.
pub fn one_hot_weights(label: Emotion) -> EmotionWeights {
    let mut percents = [0u8; 5];
    percents[label.index()] = 100;
    EmotionWeights { percents }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptEncoding {
    /// The literal template, fed to the model as word and digit tokens.
    Text,
    /// Weights and gender injected as conditioning vectors; the token-level
    /// prompt segment is empty.
    Scalar,
}

impl FromStr for PromptEncoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(PromptEncoding::Text),
            "scalar" => Ok(PromptEncoding::Scalar),
            _ => Err(format!("unknown prompt encoding `{s}` (expected text or scalar)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub rendered: String,
    pub encoding: PromptEncoding,
}

pub fn render_prompt(weights: &EmotionWeights, gender: Gender) -> Result<PromptText, PromptError> {
    weights.validate()?;
    let [h, s, n, a, u] = weights.percents();
    let rendered = format!(
        "A {gender} speaks an utterance with {h} percent happy emotion, {s} percent sad emotion, \
         {n} percent neutral emotion, {a} percent angry emotion, and {u} percent surprise emotion."
    );
    Ok(PromptText {
        rendered,
        encoding: PromptEncoding::Text,
    })
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn literal(&mut self, lit: &str) -> Result<(), PromptError> {
        let rest = &self.src[self.pos..];
        if let Some(tail) = rest.strip_prefix(lit) {
            self.pos = self.src.len() - tail.len();
            return Ok(());
        }
        let matched = rest
            .bytes()
            .zip(lit.bytes())
            .take_while(|(a, b)| a == b)
            .count();
        Err(PromptError::Parse {
            offset: self.pos + matched,
            expected: format!("{lit:?}"),
        })
    }

    fn gender(&mut self) -> Result<Gender, PromptError> {
        let rest = &self.src[self.pos..];
        // "woman" first: "man" is not a prefix of it, but keep longest-match order anyway
        for g in [Gender::Woman, Gender::Man] {
            if rest.starts_with(g.name()) {
                self.pos += g.name().len();
                return Ok(g);
            }
        }
        Err(PromptError::Parse {
            offset: self.pos,
            expected: "\"man\" or \"woman\"".into(),
        })
    }

    fn percent(&mut self) -> Result<u32, PromptError> {
        let start = self.pos;
        let digits = self.src[start..]
            .bytes()
            .take_while(u8::is_ascii_digit)
            .count();
        let expected = || "a percentage without leading zeros".to_string();
        if digits == 0 || digits > 3 {
            return Err(PromptError::Parse {
                offset: start + digits.min(3),
                expected: expected(),
            });
        }
        let text = &self.src[start..start + digits];
        if digits > 1 && text.starts_with('0') {
            return Err(PromptError::Parse {
                offset: start,
                expected: expected(),
            });
        }
        self.pos += digits;
        Ok(text.parse().expect("ascii digits"))
    }
}

/// Inverse of [`render_prompt`]. Errors carry the byte offset of the first
/// mismatch against the canonical grammar.
pub fn parse_prompt(prompt: &PromptText) -> Result<(EmotionWeights, Gender), PromptError> {
    if prompt.encoding != PromptEncoding::Text {
        return Err(PromptError::NotText);
    }
    let mut cur = Cursor {
        src: &prompt.rendered,
        pos: 0,
    };
    cur.literal("A ")?;
    let gender = cur.gender()?;
    cur.literal(" speaks an utterance with ")?;
    let mut percents = [0u32; 5];
    for (i, e) in Emotion::ALL.into_iter().enumerate() {
        if i == 4 {
            cur.literal("and ")?;
        }
        percents[i] = cur.percent()?;
        cur.literal(" percent ")?;
        cur.literal(e.name())?;
        cur.literal(" emotion")?;
        cur.literal(if i == 4 { "." } else { ", " })?;
    }
    if cur.pos != cur.src.len() {
        return Err(PromptError::Parse {
            offset: cur.pos,
            expected: "end of prompt".into(),
        });
    }
    let weights = EmotionWeights::new(percents)?;
    weights.validate()?;
    Ok((weights, gender))
}

/// Reserved ids delimiting the segments of a training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialToken {
    EndOfPrompt,
    TextToSpeech,
    EndOfSequence,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 3] = [
        SpecialToken::EndOfPrompt,
        SpecialToken::TextToSpeech,
        SpecialToken::EndOfSequence,
    ];
}

/// Ids of the three special tokens in some vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub eop: TokenId,
    pub turn: TokenId,
    pub eos: TokenId,
}

impl SpecialIds {
    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.eop || id == self.turn || id == self.eos
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("special token {id} inside the {segment} segment at position {position}")]
    Contamination {
        segment: &'static str,
        position: usize,
        id: TokenId,
    },
    #[error("malformed sample layout: {0}")]
    Layout(String),
}

/// `prompt <EOP> text <T> speech <E>`.
pub fn assemble_sample(
    specials: &SpecialIds,
    prompt: &[TokenId],
    text: &[TokenId],
    speech: &[TokenId],
) -> Result<Vec<TokenId>, LayoutError> {
    for (segment, ids) in [("prompt", prompt), ("text", text), ("speech", speech)] {
        if let Some(position) = ids.iter().position(|&id| specials.is_special(id)) {
            return Err(LayoutError::Contamination {
                segment,
                position,
                id: ids[position],
            });
        }
    }
    let mut seq = Vec::with_capacity(prompt.len() + text.len() + speech.len() + 3);
    seq.extend_from_slice(prompt);
    seq.push(specials.eop);
    seq.extend_from_slice(text);
    seq.push(specials.turn);
    seq.extend_from_slice(speech);
    seq.push(specials.eos);
    Ok(seq)
}

pub type SplitSample = (Vec<TokenId>, Vec<TokenId>, Vec<TokenId>);

pub fn split_sample(specials: &SpecialIds, seq: &[TokenId]) -> Result<SplitSample, LayoutError> {
    let positions = |id: TokenId| -> Vec<usize> {
        seq.iter()
            .enumerate()
            .filter(|(_, &t)| t == id)
            .map(|(i, _)| i)
            .collect()
    };
    let (eop, turn, eos) = (
        positions(specials.eop),
        positions(specials.turn),
        positions(specials.eos),
    );
    let (&[eop], &[turn], &[eos]) = (eop.as_slice(), turn.as_slice(), eos.as_slice()) else {
        return Err(LayoutError::Layout(format!(
            "expected exactly one each of <EOP>, <T>, <E>; found {}, {}, {}",
            eop.len(),
            turn.len(),
            eos.len()
        )));
    };
    if !(eop < turn && turn < eos) {
        return Err(LayoutError::Layout(
            "special tokens out of order (expected <EOP> < <T> < <E>)".into(),
        ));
    }
    if eos != seq.len() - 1 {
        return Err(LayoutError::Layout("<E> must be the final token".into()));
    }
    Ok((
        seq[..eop].to_vec(),
        seq[eop + 1..turn].to_vec(),
        seq[turn + 1..eos].to_vec(),
    ))
}

/// One supervised example: prompt, content, and the target speech tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub weights: EmotionWeights,
    pub gender: Gender,
    pub text_ids: Vec<TokenId>,
    pub speech_ids: Vec<TokenId>,
    pub emotion_label: Option<Emotion>,
}

impl TrainingSample {
    pub fn check(&self) -> Result<(), PromptError> {
        self.weights.validate()?;
        if self.text_ids.is_empty() || self.speech_ids.is_empty() {
            return Err(PromptError::InvalidWeights(format!(
                "sample {} has an empty text or speech segment",
                self.id
            )));
        }
        if let Some(label) = self.emotion_label {
            if self.weights != one_hot_weights(label) {
                return Err(PromptError::InvalidWeights(format!(
                    "sample {} is labeled {label} but its weights are {:?}",
                    self.id,
                    self.weights.percents()
                )));
            }
        }
        Ok(())
    }
}
