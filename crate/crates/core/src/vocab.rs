//! Partitioned token vocabulary.
//!
//! Ids are laid out as four contiguous, disjoint ranges:
//! prompt words | text symbols | speech tokens | specials.
//! A speech token packs a content symbol and a style slot as
//! `speech_base + content * slots + slot`.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::{PromptEncoding, PromptText, SpecialIds, SpecialToken};

pub type TokenId = u32;

/// Words, digits and punctuation of the prompt template.
pub const PROMPT_WORDS: [&str; 27] = [
    "A", "man", "woman", "speaks", "an", "utterance", "with", "percent", "happy", "sad", "neutral",
    "angry", "surprise", "emotion", "and", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ",",
    ".",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("character {ch:?} at position {position} is not in the text alphabet")]
    Tokenize { position: usize, ch: char },
    #[error("prompt word `{word}` at token {position} is not in the prompt vocabulary")]
    PromptWord { position: usize, word: String },
    #[error("id {id} is not a {expected} token")]
    OutOfRange { id: TokenId, expected: &'static str },
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    prompt_words: Vec<String>,
    alphabet: Vec<char>,
    style_slots: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(('a'..='z').collect(), 8).expect("default vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn new(alphabet: Vec<char>, style_slots: usize) -> Result<Self, VocabError> {
        if alphabet.is_empty() || style_slots == 0 {
            return Err(VocabError::Invalid(
                "alphabet and style slot count must be nonempty".into(),
            ));
        }
        let mut sorted = alphabet.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != alphabet.len() {
            return Err(VocabError::Invalid("duplicate alphabet symbol".into()));
        }
        if alphabet.iter().any(|c| c.is_ascii_digit() || c.is_whitespace()) {
            return Err(VocabError::Invalid(
                "digits and whitespace are reserved for prompts".into(),
            ));
        }
        Ok(Self {
            prompt_words: PROMPT_WORDS.iter().map(|s| s.to_string()).collect(),
            alphabet,
            style_slots,
        })
    }

    pub fn content_symbols(&self) -> usize {
        self.alphabet.len()
    }

    pub fn style_slots(&self) -> usize {
        self.style_slots
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn prompt_range(&self) -> Range<TokenId> {
        0..self.prompt_words.len() as TokenId
    }

    pub fn text_range(&self) -> Range<TokenId> {
        let start = self.prompt_range().end;
        start..start + self.alphabet.len() as TokenId
    }

    pub fn speech_range(&self) -> Range<TokenId> {
        let start = self.text_range().end;
        start..start + (self.alphabet.len() * self.style_slots) as TokenId
    }

    pub fn special_range(&self) -> Range<TokenId> {
        let start = self.speech_range().end;
        start..start + SpecialToken::ALL.len() as TokenId
    }

    pub fn size(&self) -> usize {
        self.special_range().end as usize
    }

    pub fn special(&self, token: SpecialToken) -> TokenId {
        let base = self.special_range().start;
        base + match token {
            SpecialToken::EndOfPrompt => 0,
            SpecialToken::TextToSpeech => 1,
            SpecialToken::EndOfSequence => 2,
        }
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds {
            eop: self.special(SpecialToken::EndOfPrompt),
            turn: self.special(SpecialToken::TextToSpeech),
            eos: self.special(SpecialToken::EndOfSequence),
        }
    }

    pub fn is_speech(&self, id: TokenId) -> bool {
        self.speech_range().contains(&id)
    }

    pub fn speech_id(&self, content: usize, slot: usize) -> TokenId {
        assert!(content < self.alphabet.len() && slot < self.style_slots);
        self.speech_range().start + (content * self.style_slots + slot) as TokenId
    }

    /// `(content, slot)` of a speech token.
    pub fn split_speech(&self, id: TokenId) -> Result<(usize, usize), VocabError> {
        if !self.is_speech(id) {
            return Err(VocabError::OutOfRange {
                id,
                expected: "speech",
            });
        }
        let offset = (id - self.speech_range().start) as usize;
        Ok((offset / self.style_slots, offset % self.style_slots))
    }

    /// Content index (0-based position in the alphabet) of a text token.
    pub fn text_content(&self, id: TokenId) -> Result<usize, VocabError> {
        if !self.text_range().contains(&id) {
            return Err(VocabError::OutOfRange { id, expected: "text" });
        }
        Ok((id - self.text_range().start) as usize)
    }

    pub fn tokenize_text(&self, s: &str) -> Result<Vec<TokenId>, VocabError> {
        let base = self.text_range().start;
        s.chars()
            .enumerate()
            .map(|(position, ch)| {
                self.alphabet
                    .iter()
                    .position(|&a| a == ch)
                    .map(|i| base + i as TokenId)
                    .ok_or(VocabError::Tokenize { position, ch })
            })
            .collect()
    }

    pub fn detokenize_text(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        ids.iter()
            .map(|&id| self.text_content(id).map(|i| self.alphabet[i]))
            .collect()
    }

    /// Word/digit token stream of a text-encoded prompt. Numbers are split
    /// into digits; trailing commas and periods become their own tokens.
    /// Scalar prompts encode to an empty stream.
    pub fn encode_prompt(&self, prompt: &PromptText) -> Result<Vec<TokenId>, VocabError> {
        if prompt.encoding == PromptEncoding::Scalar {
            return Ok(Vec::new());
        }
        let mut pieces: Vec<String> = Vec::new();
        for word in prompt.rendered.split(' ').filter(|w| !w.is_empty()) {
            let (body, punct) = match word.char_indices().last() {
                Some((i, c @ (',' | '.'))) => (&word[..i], Some(c)),
                _ => (word, None),
            };
            if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
                pieces.extend(body.chars().map(String::from));
            } else if !body.is_empty() {
                pieces.push(body.to_string());
            }
            if let Some(c) = punct {
                pieces.push(c.to_string());
            }
        }
        pieces
            .into_iter()
            .enumerate()
            .map(|(position, word)| {
                self.prompt_words
                    .iter()
                    .position(|w| *w == word)
                    .map(|i| i as TokenId)
                    .ok_or(VocabError::PromptWord { position, word })
            })
            .collect()
    }

    /// Stable digest of the id layout; checkpoints record it so a model is
    /// never paired with a vocabulary it was not trained on.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"pue-vocab-v1\0");
        for w in &self.prompt_words {
            h.update(w.as_bytes());
            h.update([0]);
        }
        h.update([1]);
        for c in &self.alphabet {
            h.update(c.to_string().as_bytes());
            h.update([0]);
        }
        h.update((self.style_slots as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
