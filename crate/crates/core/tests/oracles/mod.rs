//! Reference computations used only by tests. Nothing here calls into the
//! code path it is used to check.
#![allow(dead_code)]

use std::collections::HashMap;

use pue_core::model::{
    backward, forward, pue_loss, pue_loss_grad, teacher_forcing, Conditioning, ModelConfig, Params,
    TargetDistribution,
};
use pue_core::prompt::{assemble_sample, Gender, PromptEncoding, SpecialIds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Edit distance by plain recursion over suffixes with memoization.
pub fn edit_distance_oracle(a: &[u32], b: &[u32]) -> usize {
    fn go(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo) + 1;
        let ins = go(a, b, i, j + 1, memo) + 1;
        let best = sub.min(del).min(ins);
        memo.insert((i, j), best);
        best
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub struct GradInstance {
    pub params: Params<f64>,
    pub inputs: Vec<u32>,
    pub targets: TargetDistribution,
    pub mask: Vec<bool>,
    pub cond: Option<Conditioning>,
}

/// Random toy model and sample: V = 11 with specials 8, 9, 10.
pub fn grad_instance(seed: u64, smoothing: f64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoding = if seed % 2 == 0 {
        PromptEncoding::Text
    } else {
        PromptEncoding::Scalar
    };
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        max_sequence_length: 16,
        vocab_size: 11,
        label_smoothing: smoothing,
        prompt_encoding: encoding,
    };
    let mut params = Params::<f64>::init(&cfg, rng.gen()).unwrap();
    // perturb gains/biases away from their 1/0 init so every path is exercised
    for x in params.data.iter_mut() {
        *x += rng.gen_range(-0.05..0.05);
    }
    let specials = SpecialIds {
        eop: 8,
        turn: 9,
        eos: 10,
    };
    let mut seg = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.gen_range(0..8)).collect() };
    let prompt = if encoding == PromptEncoding::Text { seg(2) } else { vec![] };
    let text = seg(2);
    let speech = seg(3);
    let seq = assemble_sample(&specials, &prompt, &text, &speech).unwrap();
    let (inputs, targets, mask) = teacher_forcing(&seq, &specials);
    let cond = (encoding == PromptEncoding::Scalar).then(|| Conditioning {
        emotion: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
        gender: if rng.gen() { Gender::Man } else { Gender::Woman },
    });
    GradInstance {
        params,
        inputs,
        targets: TargetDistribution::new(targets, 11, smoothing),
        mask,
        cond,
    }
}

fn loss_at(inst: &GradInstance, params: &Params<f64>) -> f64 {
    let f = forward(params, &inst.inputs, inst.cond.as_ref()).unwrap();
    pue_loss(&f.logits, &inst.targets, &inst.mask).unwrap()
}

/// Largest relative error between backprop and the five-point central
/// difference `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` over every
/// parameter. `floor` bounds the denominator away from zero for parameters
/// whose true gradient vanishes.
pub fn max_gradient_error(inst: &GradInstance, step: f64, floor: f64) -> f64 {
    let f = forward(&inst.params, &inst.inputs, inst.cond.as_ref()).unwrap();
    let (_, dlogits) = pue_loss_grad(&f.logits, &inst.targets, &inst.mask).unwrap();
    let mut analytic = vec![0.0; inst.params.len()];
    backward(&inst.params, &f, &dlogits, &mut analytic);

    let mut p = inst.params.clone();
    let mut worst = 0.0f64;
    for i in 0..p.data.len() {
        let orig = p.data[i];
        let mut at = |offset: f64| {
            p.data[i] = orig + offset;
            loss_at(inst, &p)
        };
        let numeric = (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step);
        p.data[i] = orig;
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}
