//! Emotion-guided KL objective: `KL(P ‖ P_θ)` between a label-smoothed
//! one-hot target `P` and the model softmax `P_θ`, averaged over supervised
//! positions.

use super::real::Real;
use super::ModelError;
use crate::prompt::SpecialIds;
use crate::vocab::TokenId;

/// Smoothed one-hot targets: `1 − ls` on the ground-truth id and
/// `ls / (V − 1)` on every other id.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub ids: Vec<TokenId>,
    pub vocab_size: usize,
    pub label_smoothing: f64,
}

impl TargetDistribution {
    pub fn new(ids: Vec<TokenId>, vocab_size: usize, label_smoothing: f64) -> Self {
        Self {
            ids,
            vocab_size,
            label_smoothing,
        }
    }

    pub fn on_target(&self) -> f64 {
        1.0 - self.label_smoothing
    }

    pub fn off_target(&self) -> f64 {
        self.label_smoothing / (self.vocab_size - 1) as f64
    }

    pub fn prob(&self, position: usize, id: usize) -> f64 {
        if self.ids[position] as usize == id {
            self.on_target()
        } else {
            self.off_target()
        }
    }

    /// `Σ p log p` of one row (same for every position).
    fn neg_entropy(&self) -> f64 {
        let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
        xlogx(self.on_target()) + (self.vocab_size - 1) as f64 * xlogx(self.off_target())
    }
}

/// Next-token targets and supervision mask for an assembled sequence
/// `prompt <EOP> text <T> speech <E>`: the model input is every token but the
/// last, and only positions predicting speech tokens or `<E>` are supervised.
pub fn teacher_forcing(seq: &[TokenId], specials: &SpecialIds) -> (Vec<TokenId>, Vec<TokenId>, Vec<bool>) {
    let inputs = seq[..seq.len().saturating_sub(1)].to_vec();
    let targets = seq.get(1..).map(<[TokenId]>::to_vec).unwrap_or_default();
    let turn = seq.iter().position(|&t| t == specials.turn).unwrap_or(seq.len());
    let mask = (0..inputs.len()).map(|i| i >= turn).collect();
    (inputs, targets, mask)
}

/// Sum over masked rows of `KL(P ‖ softmax(logits))`. When `grad` is given,
/// `scale · (softmax − P)` is written into masked rows and zero elsewhere.
pub fn kl_sum<T: Real>(
    logits: &[T],
    targets: &TargetDistribution,
    mask: &[bool],
    scale: T,
    mut grad: Option<&mut [T]>,
) -> f64 {
    let v = targets.vocab_size;
    let rows = mask.len();
    assert_eq!(logits.len(), rows * v);
    assert_eq!(targets.ids.len(), rows);
    let neg_entropy = targets.neg_entropy();
    let (on, off) = (targets.on_target(), targets.off_target());
    let mut total = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        let row = &logits[i * v..(i + 1) * v];
        if !m {
            if let Some(g) = grad.as_deref_mut() {
                g[i * v..(i + 1) * v].iter_mut().for_each(|x| *x = T::zero());
            }
            continue;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.f64()));
        let sum_exp: f64 = row.iter().map(|&x| (x.f64() - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let target = targets.ids[i] as usize;
        let sum_logq: f64 = row.iter().map(|&x| x.f64() - lse).sum();
        let logq_t = row[target].f64() - lse;
        let cross = -(on * logq_t + off * (sum_logq - logq_t));
        total += neg_entropy + cross;
        if let Some(g) = grad.as_deref_mut() {
            let gr = &mut g[i * v..(i + 1) * v];
            for (j, (gj, &x)) in gr.iter_mut().zip(row).enumerate() {
                let q = (x.f64() - lse).exp();
                let p = if j == target { on } else { off };
                *gj = scale * T::of(q - p);
            }
        }
    }
    total
}

/// Mean `KL(P ‖ P_θ)` over supervised positions.
pub fn pue_loss<T: Real>(logits: &[T], targets: &TargetDistribution, mask: &[bool]) -> Result<f64, ModelError> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::NoSupervision);
    }
    Ok(kl_sum(logits, targets, mask, T::one(), None) / count as f64)
}

/// Loss and its gradient with respect to the logits.
pub fn pue_loss_grad<T: Real>(
    logits: &[T],
    targets: &TargetDistribution,
    mask: &[bool],
) -> Result<(f64, Vec<T>), ModelError> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::NoSupervision);
    }
    let mut grad = vec![T::zero(); logits.len()];
    let sum = kl_sum(logits, targets, mask, T::of(1.0 / count as f64), Some(&mut grad));
    Ok((sum / count as f64, grad))
}

/// Row-wise softmax in 64-bit.
pub fn softmax_rows<T: Real>(logits: &[T], vocab: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(vocab) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.f64()));
        let exps: Vec<f64> = row.iter().map(|&x| (x.f64() - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}
