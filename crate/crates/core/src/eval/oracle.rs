//! Closed-form emotion oracle over the style channel of speech tokens.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::StyleModel;
use crate::prompt::Emotion;
use crate::vocab::{TokenId, Vocabulary};

pub const EM_MAX_ITERATIONS: usize = 200;
pub const EM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionPosterior {
    pub probs: [f64; 5],
}

impl EmotionPosterior {
    pub fn get(&self, e: Emotion) -> f64 {
        self.probs[e.index()]
    }

    /// Most probable emotion; ties go to the earlier one.
    pub fn argmax(&self) -> Emotion {
        let mut best = 0;
        for i in 1..5 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Emotion::ALL[best]
    }
}

pub fn slot_histogram(vocab: &Vocabulary, speech: &[TokenId]) -> Result<Vec<u64>, EvalError> {
    let mut hist = vec![0u64; vocab.style_slots()];
    for &id in speech {
        hist[vocab.split_speech(id)?.1] += 1;
    }
    Ok(hist)
}

fn check_style(vocab: &Vocabulary, style: &StyleModel) -> Result<(), EvalError> {
    if style.slots() != vocab.style_slots() {
        return Err(EvalError::Invalid(format!(
            "style model has {} slots, vocabulary has {}",
            style.slots(),
            vocab.style_slots()
        )));
    }
    Ok(())
}

/// Posterior over the five pure emotions under a uniform prior, treating
/// tokens as independent draws from `p(slot | emotion)`. Depends on the
/// tokens only through their slot histogram.
pub fn emotion_posterior(vocab: &Vocabulary, style: &StyleModel, speech: &[TokenId]) -> Result<EmotionPosterior, EvalError> {
    check_style(vocab, style)?;
    if speech.is_empty() {
        return Err(EvalError::NoEvidence);
    }
    let hist = slot_histogram(vocab, speech)?;
    let mut log = [0.0f64; 5];
    for e in Emotion::ALL {
        log[e.index()] = hist
            .iter()
            .zip(style.row(e))
            .filter(|(&n, _)| n > 0)
            .map(|(&n, &p)| n as f64 * p.ln())
            .sum();
    }
    let top = log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Err(EvalError::Invalid("tokens are impossible under every emotion".into()));
    }
    let mut probs = log.map(|l| (l - top).exp());
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(EmotionPosterior { probs })
}

/// Result of an EM fit.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFit {
    pub weights: [f64; 5],
    pub iterations: usize,
    pub log_likelihood: f64,
}

fn log_likelihood(hist: &[f64], style: &StyleModel, w: &[f64; 5]) -> f64 {
    hist.iter()
        .enumerate()
        .filter(|(_, &n)| n > 0.0)
        .map(|(s, &n)| {
            let p: f64 = Emotion::ALL.iter().map(|&e| w[e.index()] * style.row(e)[s]).sum();
            n * p.ln()
        })
        .sum()
}

/// Maximum-likelihood mixture weights for a slot histogram by EM from the
/// uniform start. Stops after [`EM_MAX_ITERATIONS`] or once an iteration
/// improves the log-likelihood by less than [`EM_TOLERANCE`]. An empty
/// histogram yields uniform weights.
pub fn fit_mixture(hist: &[f64], style: &StyleModel) -> MixtureFit {
    let mut w = [0.2f64; 5];
    let total: f64 = hist.iter().sum();
    if total <= 0.0 {
        return MixtureFit {
            weights: w,
            iterations: 0,
            log_likelihood: 0.0,
        };
    }
    let mut ll = log_likelihood(hist, style, &w);
    let mut iterations = 0;
    while iterations < EM_MAX_ITERATIONS {
        let mut next = [0.0f64; 5];
        for (s, &n) in hist.iter().enumerate() {
            if n == 0.0 {
                continue;
            }
            let joint: Vec<f64> = Emotion::ALL.iter().map(|&e| w[e.index()] * style.row(e)[s]).collect();
            let p: f64 = joint.iter().sum();
            for (acc, j) in next.iter_mut().zip(&joint) {
                *acc += n * j / p;
            }
        }
        next.iter_mut().for_each(|x| *x /= total);
        let next_ll = log_likelihood(hist, style, &next);
        debug_assert!(
            next_ll >= ll - 1e-9 * ll.abs().max(1.0),
            "EM decreased the log-likelihood: {ll} -> {next_ll}"
        );
        w = next;
        iterations += 1;
        let gain = next_ll - ll;
        ll = next_ll;
        if gain < EM_TOLERANCE {
            break;
        }
    }
    MixtureFit {
        weights: w,
        iterations,
        log_likelihood: ll,
    }
}

/// Mixture weights (on the simplex, in emotion order) that best explain the
/// slots of `speech`. Reliable from about 16 tokens.
pub fn estimate_mixture_weights(vocab: &Vocabulary, style: &StyleModel, speech: &[TokenId]) -> Result<[f64; 5], EvalError> {
    check_style(vocab, style)?;
    let hist: Vec<f64> = slot_histogram(vocab, speech)?.into_iter().map(|n| n as f64).collect();
    Ok(fit_mixture(&hist, style).weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_posterior() {
        let v = Vocabulary::default();
        let post = emotion_posterior(&v, &StyleModel::default(), &[v.speech_id(0, 3)]).unwrap();
        assert!((post.get(Emotion::Angry) - 0.58 / 0.82).abs() < 1e-12);
        for e in [Emotion::Happy, Emotion::Sad, Emotion::Neutral, Emotion::Surprise] {
            assert!((post.get(e) - 0.06 / 0.82).abs() < 1e-12);
        }
        assert!(matches!(emotion_posterior(&v, &StyleModel::default(), &[]), Err(EvalError::NoEvidence)));
    }

    #[test]
    fn uniform_table_gives_uniform_posterior() {
        let v = Vocabulary::default();
        let style = StyleModel::new(vec![vec![0.125; 8]; 5]).unwrap();
        let ids: Vec<_> = (0..8).map(|s| v.speech_id(2, s)).collect();
        let post = emotion_posterior(&v, &style, &ids).unwrap();
        assert!(post.probs.iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }

    #[test]
    fn exact_row_histogram_converges_to_vertex() {
        let style = StyleModel::default();
        let hist: Vec<f64> = style.row(Emotion::Happy).iter().map(|p| p * 1000.0).collect();
        let fit = fit_mixture(&hist, &style);
        assert!(fit.weights[0] > 0.95, "{:?}", fit);
    }

    #[test]
    fn empty_histogram_is_uniform() {
        let fit = fit_mixture(&[0.0; 8], &StyleModel::default());
        assert_eq!(fit.weights, [0.2; 5]);
    }
}
