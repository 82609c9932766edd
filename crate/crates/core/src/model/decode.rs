//! Token-at-a-time inference with cached keys and values.

use super::params::{Params, COND_POSITIONS};
use super::real::{matmul, Real};
use super::transformer::{check_inputs, embed, gelu, layernorm, special_ids, Conditioning};
use super::ModelError;
use crate::vocab::TokenId;

pub struct IncrementalDecoder<'a, T> {
    params: &'a Params<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    rows: usize,
    tokens: usize,
    segment: usize,
    local: usize,
}

impl<'a, T: Real> IncrementalDecoder<'a, T> {
    pub fn new(params: &'a Params<T>, cond: Option<&Conditioning>) -> Result<Self, ModelError> {
        check_inputs(&params.config, &[], cond)?;
        let n_layers = params.config.n_layers;
        let mut dec = Self {
            params,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            rows: 0,
            tokens: 0,
            segment: 0,
            local: 0,
        };
        if let Some(c) = cond {
            let positions: Vec<_> = (0..COND_POSITIONS).map(|i| (0, i)).collect();
            let x = embed(params, &[], Some(c), &positions);
            dec.run(x);
            dec.local = COND_POSITIONS;
        }
        Ok(dec)
    }

    /// Appends `token` and returns the next-token logits.
    pub fn feed(&mut self, token: TokenId) -> Result<Vec<T>, ModelError> {
        let cfg = &self.params.config;
        if self.tokens >= cfg.max_sequence_length {
            return Err(ModelError::Length {
                len: self.tokens + 1,
                max: cfg.max_sequence_length,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::Config(format!("token id {token} outside the vocabulary")));
        }
        let (eop, turn) = special_ids(cfg.vocab_size);
        if token == eop {
            self.segment = 1;
            self.local = 0;
        } else if token == turn {
            self.segment = 2;
            self.local = 0;
        }
        let x = embed(self.params, &[token], None, &[(self.segment, self.local)]);
        self.local += 1;
        self.tokens += 1;
        let h = self.run(x);
        Ok(self.head(&h))
    }

    pub fn feed_all(&mut self, tokens: &[TokenId]) -> Result<Vec<T>, ModelError> {
        let mut last = Vec::new();
        for &t in tokens {
            last = self.feed(t)?;
        }
        Ok(last)
    }

    pub fn len(&self) -> usize {
        self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    /// Pushes new rows through every layer; returns the final hidden state of
    /// the last row.
    fn run(&mut self, mut h: Vec<T>) -> Vec<T> {
        let p = self.params;
        let cfg = &p.config;
        let data = &p.data;
        let (d, ff, heads) = (cfg.d_model, cfg.ff_dim(), cfg.n_heads);
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let r = h.len() / d;
        let base = self.rows;
        for (li, layer) in p.layout.layers.iter().enumerate() {
            let mut a = vec![T::zero(); r * d];
            layernorm(&h, &data[layer.ln1_g.clone()], &data[layer.ln1_b.clone()], d, &mut a);
            let mut qkv = vec![T::zero(); r * 3 * d];
            matmul(&a, &data[layer.w_qkv.clone()], &mut qkv, r, d, 3 * d, false);
            let b_qkv = &data[layer.b_qkv.clone()];
            for row in qkv.chunks_exact_mut(3 * d) {
                for (x, &b) in row.iter_mut().zip(b_qkv) {
                    *x += b;
                }
                self.keys[li].extend_from_slice(&row[d..2 * d]);
                self.values[li].extend_from_slice(&row[2 * d..]);
            }
            let (keys, values) = (&self.keys[li], &self.values[li]);
            let mut att = vec![T::zero(); r * d];
            let mut scores = vec![T::zero(); base + r];
            for i in 0..r {
                let upto = base + i + 1;
                for hh in 0..heads {
                    let q = &qkv[i * 3 * d + hh * hd..][..hd];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate().take(upto) {
                        let k = &keys[j * d + hh * hd..][..hd];
                        *s = q.iter().zip(k).fold(T::zero(), |acc, (&x, &y)| acc + x * y) * scale;
                        max = max.max(*s);
                    }
                    let mut sum = T::zero();
                    for s in scores.iter_mut().take(upto) {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let o = &mut att[i * d + hh * hd..][..hd];
                    for (j, &s) in scores.iter().enumerate().take(upto) {
                        let w = s / sum;
                        let v = &values[j * d + hh * hd..][..hd];
                        for c in 0..hd {
                            o[c] += w * v[c];
                        }
                    }
                }
            }
            matmul(&att, &data[layer.w_o.clone()], &mut h, r, d, d, true);
            add_bias(&mut h, &data[layer.b_o.clone()]);
            let mut m = vec![T::zero(); r * d];
            layernorm(&h, &data[layer.ln2_g.clone()], &data[layer.ln2_b.clone()], d, &mut m);
            let mut pre = vec![T::zero(); r * ff];
            matmul(&m, &data[layer.w_fc.clone()], &mut pre, r, d, ff, false);
            add_bias(&mut pre, &data[layer.b_fc.clone()]);
            pre.iter_mut().for_each(|x| *x = gelu(*x));
            matmul(&pre, &data[layer.w_proj.clone()], &mut h, r, ff, d, true);
            add_bias(&mut h, &data[layer.b_proj.clone()]);
        }
        self.rows += r;
        h[(r - 1) * d..].to_vec()
    }

    fn head(&self, h: &[T]) -> Vec<T> {
        let p = self.params;
        let l = &p.layout;
        let d = p.config.d_model;
        let v = p.config.vocab_size;
        let mut z = vec![T::zero(); d];
        layernorm(h, &p.data[l.lnf_g.clone()], &p.data[l.lnf_b.clone()], d, &mut z);
        let mut logits = p.data[l.head_b.clone()].to_vec();
        matmul(&z, &p.data[l.head_w.clone()], &mut logits, 1, d, v, true);
        logits
    }
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    for row in y.chunks_exact_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}
