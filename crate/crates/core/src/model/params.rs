use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::ModelError;
use crate::prompt::PromptEncoding;

/// Conditioning positions prepended under the scalar prompt encoding:
/// one per emotion, then one for gender.
pub const COND_POSITIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_sequence_length: usize,
    pub vocab_size: usize,
    pub label_smoothing: f64,
    pub prompt_encoding: PromptEncoding,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, prompt_encoding: PromptEncoding) -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_sequence_length: 160,
            vocab_size,
            label_smoothing: 0.1,
            prompt_encoding,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 2 || self.max_sequence_length == 0 {
            return bad("vocab_size must be >= 2 and max_sequence_length positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn scalar_conditioning(&self) -> bool {
        self.prompt_encoding == PromptEncoding::Scalar
    }

    /// Rows of the position table: segment-local positions can reach the
    /// full sequence length plus the conditioning prefix.
    pub fn position_rows(&self) -> usize {
        self.max_sequence_length + COND_POSITIONS + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct LayerIndex {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

/// Named tensors packed into one flat buffer, in a fixed order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub seg_emb: Range<usize>,
    pub cond_emotion: Option<Range<usize>>,
    pub cond_gender: Option<Range<usize>>,
    pub layers: Vec<LayerIndex>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut tensors: Vec<TensorInfo> = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>| -> Range<usize> {
            let info = TensorInfo {
                name,
                shape,
                offset: total,
            };
            total += info.len();
            let r = info.range();
            tensors.push(info);
            r
        };
        let tok_emb = push("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.position_rows(), d]);
        let seg_emb = push("seg_emb".into(), vec![3, d]);
        let (cond_emotion, cond_gender) = if cfg.scalar_conditioning() {
            (
                Some(push("cond_emotion".into(), vec![5, d])),
                Some(push("cond_gender".into(), vec![2, d])),
            )
        } else {
            (None, None)
        };
        let ff = cfg.ff_dim();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let mut t = |n: &str, shape: Vec<usize>| push(format!("layer{l}.{n}"), shape);
                LayerIndex {
                    ln1_g: t("ln1.gain", vec![d]),
                    ln1_b: t("ln1.bias", vec![d]),
                    w_qkv: t("attn.qkv.weight", vec![d, 3 * d]),
                    b_qkv: t("attn.qkv.bias", vec![3 * d]),
                    w_o: t("attn.out.weight", vec![d, d]),
                    b_o: t("attn.out.bias", vec![d]),
                    ln2_g: t("ln2.gain", vec![d]),
                    ln2_b: t("ln2.bias", vec![d]),
                    w_fc: t("mlp.fc.weight", vec![d, ff]),
                    b_fc: t("mlp.fc.bias", vec![ff]),
                    w_proj: t("mlp.proj.weight", vec![ff, d]),
                    b_proj: t("mlp.proj.bias", vec![d]),
                }
            })
            .collect();
        let lnf_g = push("ln_f.gain".into(), vec![d]);
        let lnf_b = push("ln_f.bias".into(), vec![d]);
        let head_w = push("head.weight".into(), vec![d, cfg.vocab_size]);
        let head_b = push("head.bias".into(), vec![cfg.vocab_size]);
        Self {
            tensors,
            tok_emb,
            pos_emb,
            seg_emb,
            cond_emotion,
            cond_gender,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total,
        }
    }

    fn inits(&self) -> Vec<Init> {
        self.tensors
            .iter()
            .map(|t| {
                if t.name.ends_with(".gain") {
                    Init::Ones
                } else if t.name.ends_with(".bias") {
                    Init::Zeros
                } else {
                    Init::Uniform
                }
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// A flat parameter (or gradient) vector together with its layout.
#[derive(Debug, Clone)]
pub struct Params<T> {
    pub config: ModelConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Real> Params<T> {
    /// Uniform in ±1/√d_model for embeddings and projections; layer-norm
    /// gains one; all biases (including the output bias) zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Arc::new(Layout::new(config));
        let scale = 1.0 / (config.d_model as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![T::zero(); layout.total];
        for (info, init) in layout.tensors.iter().zip(layout.inits()) {
            for x in &mut data[info.range()] {
                *x = match init {
                    Init::Uniform => T::of(rng.gen_range(-scale..scale)),
                    Init::Ones => T::one(),
                    Init::Zeros => T::zero(),
                };
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    /// Every parameter zero. The network then predicts a uniform distribution
    /// at every position.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Arc::new(Layout::new(config));
        Ok(Self {
            config: config.clone(),
            data: vec![T::zero(); layout.total],
            layout,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.get(name).map(|t| &self.data[t.range()])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        for enc in [PromptEncoding::Text, PromptEncoding::Scalar] {
            let cfg = ModelConfig::new(264, enc);
            let l = Layout::new(&cfg);
            let mut next = 0;
            for t in &l.tensors {
                assert_eq!(t.offset, next, "{}", t.name);
                next += t.len();
            }
            assert_eq!(next, l.total);
            assert_eq!(l.cond_emotion.is_some(), enc == PromptEncoding::Scalar);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::new(64, PromptEncoding::Scalar);
        let a = Params::<f32>::init(&cfg, 1).unwrap();
        let b = Params::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(a.data, b.data);
        let bound = 1.0 / (cfg.d_model as f32).sqrt();
        assert!(a.tensor("tok_emb").unwrap().iter().all(|x| x.abs() <= bound));
        assert!(a.tensor("head.bias").unwrap().iter().all(|&x| x == 0.0));
        assert!(a.tensor("layer0.ln1.gain").unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(64, PromptEncoding::Text);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 4;
        cfg.label_smoothing = 1.0;
        assert!(cfg.validate().is_err());
    }
}
