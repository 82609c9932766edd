use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracle::estimate_mixture_weights;
use super::report::{mean_ci, EvalReport};
use super::EvalError;
use crate::corpus::{derive_seed, StyleModel};
use crate::model::ModelCheckpoint;
use crate::prompt::{Emotion, Gender};
use crate::train::{mixing_grid, synthesize, SamplingParams};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicitySpec {
    pub primary: Emotion,
    pub secondary: Emotion,
    /// Ascending secondary percentages.
    pub levels: Vec<u32>,
    pub n_per_level: usize,
    pub seeds: Vec<u64>,
    /// `seed` is replaced per utterance.
    pub sampling: SamplingParams,
    pub min_text_len: usize,
    pub max_text_len: usize,
}

impl MonotonicitySpec {
    pub fn new(primary: Emotion, secondary: Emotion, levels: Vec<u32>) -> Self {
        Self {
            primary,
            secondary,
            levels,
            n_per_level: 100,
            seeds: vec![0, 1, 2],
            sampling: SamplingParams::default(),
            min_text_len: 6,
            max_text_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub spec: MonotonicitySpec,
    /// `[seed][level]` mean estimated secondary weight.
    pub per_seed_means: Vec<Vec<f64>>,
    /// Pooled over seeds: `(mean, 95% half-width, utterances used)` per level.
    pub pooled: Vec<(f64, f64, usize)>,
    /// Utterances dropped per level because synthesis hit the token budget.
    pub truncated: Vec<usize>,
    pub monotone_per_seed: Vec<bool>,
    pub monotone_pooled: bool,
}

impl MonotonicityReport {
    pub fn all_seeds_monotone(&self) -> bool {
        !self.monotone_per_seed.is_empty() && self.monotone_per_seed.iter().all(|&m| m)
    }

    pub fn to_eval_report(&self) -> EvalReport {
        let metric = format!("mean_estimated_{}_weight", self.spec.secondary);
        let mut r = EvalReport::new(metric);
        for (i, &level) in self.spec.levels.iter().enumerate() {
            let (mean, half, n) = self.pooled[i];
            r.push(format!("level{level}"), level as f64, mean, half, n);
        }
        for (s, means) in self.spec.seeds.iter().zip(&self.per_seed_means) {
            for (&level, &m) in self.spec.levels.iter().zip(means) {
                r.push(format!("seed{s}/level{level}"), level as f64, m, 0.0, self.spec.n_per_level);
            }
        }
        r
    }
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite()) && xs.windows(2).all(|w| w[0] < w[1])
}

/// Random lowercase text for utterance `index` under `seed`.
pub fn probe_text(vocab: &Vocabulary, seed: u64, index: u64, min_len: usize, max_len: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    let len = rng.gen_range(min_len..=max_len);
    let alphabet = vocab.alphabet();
    (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

/// Synthesizes `n_per_level` utterances per level and seed with the
/// secondary emotion mixed into the primary at each level, then reports the
/// mean estimated secondary weight. Utterances use the same texts across
/// levels within a seed.
pub fn monotonicity_report(
    checkpoint: &ModelCheckpoint,
    vocab: &Vocabulary,
    style: &StyleModel,
    spec: &MonotonicitySpec,
) -> Result<MonotonicityReport, EvalError> {
    if spec.levels.is_empty() || spec.seeds.is_empty() || spec.n_per_level == 0 {
        return Err(EvalError::Invalid("levels, seeds and n_per_level must be nonempty".into()));
    }
    if spec.levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Invalid(format!("levels {:?} are not strictly ascending", spec.levels)));
    }
    if spec.min_text_len == 0 || spec.min_text_len > spec.max_text_len {
        return Err(EvalError::Invalid("invalid probe text length range".into()));
    }
    let grid = mixing_grid(spec.primary, spec.secondary, &spec.levels)?;
    let sec = spec.secondary.index();

    let mut estimates: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut truncated = vec![0usize; grid.len()];
    for &seed in &spec.seeds {
        let mut per_level = Vec::new();
        for (li, weights) in grid.iter().enumerate() {
            let jobs: Vec<u64> = (0..spec.n_per_level as u64).collect();
            let results: Vec<Result<Option<f64>, EvalError>> = jobs
                .par_iter()
                .map(|&i| {
                    let text = probe_text(vocab, seed, i, spec.min_text_len, spec.max_text_len);
                    let gender = if i % 2 == 0 { Gender::Woman } else { Gender::Man };
                    let sampling = SamplingParams {
                        seed: derive_seed(derive_seed(seed, 1 << 32 | li as u64), i),
                        ..spec.sampling.clone()
                    };
                    let out = synthesize(checkpoint, vocab, weights, gender, &text, &sampling)?;
                    if out.truncated {
                        return Ok(None);
                    }
                    Ok(Some(estimate_mixture_weights(vocab, style, &out.speech_ids)?[sec]))
                })
                .collect();
            let mut kept = Vec::new();
            for r in results {
                match r? {
                    Some(w) => kept.push(w),
                    None => truncated[li] += 1,
                }
            }
            per_level.push(kept);
        }
        estimates.push(per_level);
    }

    let per_seed_means: Vec<Vec<f64>> = estimates
        .iter()
        .map(|levels| {
            levels
                .iter()
                .map(|xs| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 })
                .collect()
        })
        .collect();
    let pooled: Vec<(f64, f64, usize)> = (0..grid.len())
        .map(|li| {
            let all: Vec<f64> = estimates.iter().flat_map(|s| s[li].iter().copied()).collect();
            if all.is_empty() {
                (f64::NAN, 0.0, 0)
            } else {
                let (m, h) = mean_ci(&all);
                (m, h, all.len())
            }
        })
        .collect();
    let pooled_means: Vec<f64> = pooled.iter().map(|p| p.0).collect();
    Ok(MonotonicityReport {
        spec: spec.clone(),
        monotone_per_seed: per_seed_means.iter().map(|m| strictly_increasing(m)).collect(),
        monotone_pooled: strictly_increasing(&pooled_means),
        per_seed_means,
        pooled,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Params, TrainingMeta};
    use crate::prompt::PromptEncoding;

    #[test]
    fn untrained_model_still_reports() {
        let vocab = Vocabulary::default();
        let mut cfg = ModelConfig::new(vocab.size(), PromptEncoding::Scalar);
        cfg.d_model = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        let ck = ModelCheckpoint::new(Params::init(&cfg, 1).unwrap(), &vocab, TrainingMeta::default());
        let mut spec = MonotonicitySpec::new(Emotion::Surprise, Emotion::Angry, vec![50]);
        spec.n_per_level = 4;
        spec.seeds = vec![7];
        spec.sampling.max_new_tokens = 40;
        let r = monotonicity_report(&ck, &vocab, &StyleModel::default(), &spec).unwrap();
        assert_eq!(r.per_seed_means.len(), 1);
        assert_eq!(r.pooled[0].2 + r.truncated[0], 4);
        spec.levels = vec![60, 30];
        assert!(monotonicity_report(&ck, &vocab, &StyleModel::default(), &spec).is_err());
    }

    #[test]
    fn single_level_is_trivially_monotone() {
        assert!(strictly_increasing(&[0.3]));
        assert!(!strictly_increasing(&[0.3, 0.3]));
        assert!(!strictly_increasing(&[0.1, f64::NAN]));
    }

    #[test]
    fn probe_texts_are_seeded() {
        let v = Vocabulary::default();
        assert_eq!(probe_text(&v, 1, 2, 6, 16), probe_text(&v, 1, 2, 6, 16));
        assert_ne!(probe_text(&v, 1, 2, 6, 16), probe_text(&v, 2, 2, 6, 16));
        let t = probe_text(&v, 3, 0, 6, 16);
        assert!((6..=16).contains(&t.len()));
    }
}
