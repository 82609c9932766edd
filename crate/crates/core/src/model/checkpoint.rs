//! On-disk model container.
//!
//! ```text
//! "PUE1"                      magic, doubles as the major format version
//! u64 LE                      header byte count
//! header                      UTF-8 JSON (CheckpointHeader)
//! [u8; 32]                    SHA-256 of the header bytes
//! u32 LE                      tensor count
//! per tensor:                 u32 LE name length, name bytes,
//!                             u64 LE element offset, u64 LE element count
//! f32 LE * total              tensor data
//! ```
//!
//! The header records a SHA-256 of everything after the header digest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

use super::params::{Layout, ModelConfig, Params};
use super::ModelError;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"PUE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: u64,
    pub final_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    config: ModelConfig,
    vocab_hash: String,
    training: TrainingMeta,
    payload_sha256: String,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub params: Params<f32>,
    pub vocab_hash: String,
    pub training: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn new(params: Params<f32>, vocab: &Vocabulary, training: TrainingMeta) -> Self {
        Self {
            params,
            vocab_hash: vocab.hash(),
            training,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Directory and tensor data.
    pub fn payload(&self) -> Vec<u8> {
        let layout = &self.params.layout;
        let mut out = Vec::with_capacity(16 + self.params.len() * 4 + layout.tensors.len() * 48);
        out.extend_from_slice(&(layout.tensors.len() as u32).to_le_bytes());
        for t in &layout.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.offset as u64).to_le_bytes());
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        }
        for x in &self.params.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = self.payload();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.params.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            training: self.training.clone(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(4 + 8 + json.len() + 32 + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&Sha256::digest(&json));
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], vocab: &Vocabulary) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(ModelError::Version(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let header_len = r.u64("header length")?;
        if header_len > bytes.len() as u64 {
            return Err(ModelError::Truncated(format!(
                "header claims {header_len} bytes, file has {}",
                bytes.len()
            )));
        }
        let json = r.take(header_len as usize, "header")?;
        let digest = r.take(32, "header digest")?;
        if Sha256::digest(json).as_slice() != digest {
            return Err(ModelError::Integrity("header digest mismatch".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| ModelError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(ModelError::Version(format!(
                "format version {}, expected {FORMAT_VERSION}",
                header.format_version
            )));
        }
        if header.vocab_hash != vocab.hash() {
            return Err(ModelError::VocabularyMismatch {
                expected: vocab.hash(),
                found: header.vocab_hash,
            });
        }
        header.config.validate()?;
        if header.config.vocab_size != vocab.size() {
            return Err(ModelError::Header(format!(
                "config vocab_size {} but vocabulary has {}",
                header.config.vocab_size,
                vocab.size()
            )));
        }
        let payload = &bytes[r.pos..];
        let layout = Arc::new(Layout::new(&header.config));
        let expected_len = 4
            + layout.tensors.iter().map(|t| 4 + t.name.len() + 16).sum::<usize>()
            + layout.total * 4;
        if payload.len() < expected_len {
            return Err(ModelError::Truncated(format!(
                "payload has {} bytes, expected {expected_len}",
                payload.len()
            )));
        }
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(ModelError::Integrity("tensor payload digest mismatch".into()));
        }
        let count = r.u32("tensor count")? as usize;
        if count != layout.tensors.len() {
            return Err(ModelError::Header(format!(
                "{count} tensors stored, config implies {}",
                layout.tensors.len()
            )));
        }
        for t in &layout.tensors {
            let name_len = r.u32("tensor name length")? as usize;
            let name = r.take(name_len, "tensor name")?;
            let offset = r.u64("tensor offset")?;
            let len = r.u64("tensor length")?;
            if name != t.name.as_bytes() || offset != t.offset as u64 || len != t.len() as u64 {
                return Err(ModelError::Header(format!(
                    "tensor directory entry `{}` does not match the configured layout",
                    String::from_utf8_lossy(name)
                )));
            }
        }
        let raw = r.take(layout.total * 4, "tensor data")?;
        if r.pos != bytes.len() {
            return Err(ModelError::Header("trailing bytes after tensor data".into()));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            params: Params {
                config: header.config,
                layout,
                data,
            },
            vocab_hash: header.vocab_hash,
            training: header.training,
        })
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<ModelCheckpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    ModelCheckpoint::from_bytes(&bytes, vocab)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Truncated(format!("file ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptEncoding;

    fn small(vocab: &Vocabulary) -> ModelCheckpoint {
        let mut cfg = ModelConfig::new(vocab.size(), PromptEncoding::Scalar);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 1;
        cfg.max_sequence_length = 12;
        let params = Params::init(&cfg, 11).unwrap();
        ModelCheckpoint::new(
            params,
            vocab,
            TrainingMeta {
                step: 7,
                final_loss: Some(1.25),
                best_val_loss: None,
            },
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let vocab = Vocabulary::default();
        let ck = small(&vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pue");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path, &vocab).unwrap();
        assert_eq!(back.params.config, ck.params.config);
        assert_eq!(back.training, ck.training);
        let bits = |p: &Params<f32>| p.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ck.params));
        assert_eq!(back.payload(), ck.payload());
        assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn every_header_byte_corruption_is_detected() {
        let vocab = Vocabulary::default();
        let bytes = small(&vocab).to_bytes();
        let header_end = 12 + u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize + 32;
        for i in 0..header_end {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            let err = ModelCheckpoint::from_bytes(&b, &vocab).unwrap_err();
            if i < 4 {
                assert!(matches!(err, ModelError::Version(_)), "byte {i}: {err:?}");
            }
        }
    }

    #[test]
    fn payload_corruption_and_truncation() {
        let vocab = Vocabulary::default();
        let bytes = small(&vocab).to_bytes();
        let mut b = bytes.clone();
        let last = b.len() - 1;
        b[last] ^= 0x80;
        assert!(matches!(
            ModelCheckpoint::from_bytes(&b, &vocab),
            Err(ModelError::Integrity(_))
        ));
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(matches!(
                ModelCheckpoint::from_bytes(&bytes[..cut], &vocab),
                Err(ModelError::Truncated(_))
            ), "cut {cut}");
        }
    }

    #[test]
    fn different_vocabulary_is_rejected() {
        let vocab = Vocabulary::default();
        let bytes = small(&vocab).to_bytes();
        let other = Vocabulary::new(('a'..='z').collect(), 6).unwrap();
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bytes, &other),
            Err(ModelError::VocabularyMismatch { .. })
        ));
    }
}
