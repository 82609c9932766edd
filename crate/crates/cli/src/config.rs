//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Relative paths are taken relative to the config file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pue_core::corpus::{CorpusConfig, StyleModel};
use pue_core::model::{AdamConfig, ModelConfig};
use pue_core::train::{SamplingMode, SamplingParams};
use pue_core::{Emotion, Gender, PromptEncoding, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub corpus: CorpusConfig,
    pub style_peak: f64,
    /// Explicit `p(slot | emotion)` rows; each replaces the peaked default.
    pub style_rows: [Option<Vec<f64>>; 5],
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub manifest: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub patience: u64,
    pub sampling: SamplingParams,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let vocab = Vocabulary::default();
        Self {
            seed: 0,
            threads: 1,
            corpus: CorpusConfig::default(),
            style_peak: 0.58,
            style_rows: Default::default(),
            model: ModelConfig::new(vocab.size(), PromptEncoding::Scalar),
            optimizer: AdamConfig::default(),
            manifest: None,
            split: None,
            out_dir: None,
            batch_tokens: 2048,
            max_steps: 4000,
            eval_interval: 100,
            patience: 5,
            sampling: SamplingParams::default(),
        }
    }
}

fn encoding_name(e: PromptEncoding) -> &'static str {
    match e {
        PromptEncoding::Text => "text",
        PromptEncoding::Scalar => "scalar",
    }
}

fn mode_name(m: SamplingMode) -> &'static str {
    match m {
        SamplingMode::Greedy => "greedy",
        SamplingMode::TopK => "top_k",
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError(format!("bad value `{value}` for {key}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_speakers(value: &str) -> Result<Vec<Gender>, ConfigError> {
    value
        .split(',')
        .map(|v| parse::<Gender>("corpus.speakers", v.trim()))
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim(), base)
                .map_err(|e| ConfigError(format!("line {}: {}", i + 1, e.0)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), ConfigError> {
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        match key {
            "seed" => self.seed = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "out_dir" => self.out_dir = Some(path(value)),
            "corpus.per_emotion" => self.corpus.per_emotion = parse(key, value)?,
            "corpus.speakers" => self.corpus.speakers = parse_speakers(value)?,
            "corpus.frame_rate" => self.corpus.frame_rate = parse(key, value)?,
            "corpus.min_text_len" => self.corpus.min_text_len = parse(key, value)?,
            "corpus.max_text_len" => self.corpus.max_text_len = parse(key, value)?,
            "style.peak" => self.style_peak = parse(key, value)?,
            "model.d_model" => self.model.d_model = parse(key, value)?,
            "model.n_layers" => self.model.n_layers = parse(key, value)?,
            "model.n_heads" => self.model.n_heads = parse(key, value)?,
            "model.max_sequence_length" => self.model.max_sequence_length = parse(key, value)?,
            "model.label_smoothing" => self.model.label_smoothing = parse(key, value)?,
            "model.prompt_encoding" => self.model.prompt_encoding = parse(key, value)?,
            "train.manifest" => self.manifest = Some(path(value)),
            "train.split" => self.split = Some(path(value)),
            "train.batch_tokens" => self.batch_tokens = parse(key, value)?,
            "train.max_steps" => self.max_steps = parse(key, value)?,
            "train.eval_interval" => self.eval_interval = parse(key, value)?,
            "train.patience" => self.patience = parse(key, value)?,
            "train.learning_rate" => self.optimizer.learning_rate = parse(key, value)?,
            "train.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "train.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "train.epsilon" => self.optimizer.epsilon = parse(key, value)?,
            "train.clip_norm" => {
                self.optimizer.clip_norm = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "sampling.mode" => self.sampling.mode = parse(key, value)?,
            "sampling.k" => self.sampling.k = parse(key, value)?,
            "sampling.temperature" => self.sampling.temperature = parse(key, value)?,
            "sampling.max_new_tokens" => self.sampling.max_new_tokens = parse(key, value)?,
            _ => {
                let emotion = key
                    .strip_prefix("style.row.")
                    .ok_or_else(|| ConfigError(format!("unknown key `{key}`")))?;
                let e: Emotion = parse(key, emotion)?;
                self.style_rows[e.index()] = Some(parse_list(key, value)?);
            }
        }
        Ok(())
    }

    /// Applies `PUE_SEED` when set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var("PUE_SEED") {
            self.seed = parse("PUE_SEED", v.trim())?;
        }
        Ok(())
    }

    pub fn style(&self) -> Result<StyleModel, ConfigError> {
        let peaked = StyleModel::peaked(Vocabulary::default().style_slots(), self.style_peak)
            .map_err(|e| ConfigError(e.to_string()))?;
        let rows = peaked
            .slot_dist
            .iter()
            .zip(&self.style_rows)
            .map(|(d, o)| o.clone().unwrap_or_else(|| d.clone()))
            .collect();
        StyleModel::new(rows).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    /// Every key with its effective value, loadable by [`Self::parse`].
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let join = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        kv("seed", self.seed.to_string());
        kv("threads", self.threads.to_string());
        if let Some(p) = &self.out_dir {
            kv("out_dir", p.display().to_string());
        }
        kv("corpus.per_emotion", self.corpus.per_emotion.to_string());
        kv(
            "corpus.speakers",
            self.corpus.speakers.iter().map(|g| g.name()).collect::<Vec<_>>().join(","),
        );
        kv("corpus.frame_rate", self.corpus.frame_rate.to_string());
        kv("corpus.min_text_len", self.corpus.min_text_len.to_string());
        kv("corpus.max_text_len", self.corpus.max_text_len.to_string());
        kv("style.peak", self.style_peak.to_string());
        for e in Emotion::ALL {
            if let Some(row) = &self.style_rows[e.index()] {
                kv(&format!("style.row.{e}"), join(row));
            }
        }
        kv("model.d_model", self.model.d_model.to_string());
        kv("model.n_layers", self.model.n_layers.to_string());
        kv("model.n_heads", self.model.n_heads.to_string());
        kv("model.max_sequence_length", self.model.max_sequence_length.to_string());
        kv("model.label_smoothing", self.model.label_smoothing.to_string());
        kv("model.prompt_encoding", encoding_name(self.model.prompt_encoding).into());
        if let Some(p) = &self.manifest {
            kv("train.manifest", p.display().to_string());
        }
        if let Some(p) = &self.split {
            kv("train.split", p.display().to_string());
        }
        kv("train.batch_tokens", self.batch_tokens.to_string());
        kv("train.max_steps", self.max_steps.to_string());
        kv("train.eval_interval", self.eval_interval.to_string());
        kv("train.patience", self.patience.to_string());
        kv("train.learning_rate", self.optimizer.learning_rate.to_string());
        kv("train.beta1", self.optimizer.beta1.to_string());
        kv("train.beta2", self.optimizer.beta2.to_string());
        kv("train.epsilon", self.optimizer.epsilon.to_string());
        kv(
            "train.clip_norm",
            self.optimizer.clip_norm.map_or("none".into(), |c| c.to_string()),
        );
        kv("sampling.mode", mode_name(self.sampling.mode).into());
        kv("sampling.k", self.sampling.k.to_string());
        kv("sampling.temperature", self.sampling.temperature.to_string());
        kv("sampling.max_new_tokens", self.sampling.max_new_tokens.to_string());
        s
    }
}
