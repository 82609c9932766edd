//! Pre-norm decoder-only transformer with explicit backpropagation.
//!
//! Each token is embedded as `token + position + segment`. Segments are
//! prompt / text / speech; `<EOP>` opens the text segment and `<T>` the speech
//! segment, and positions restart at zero in each segment so text and speech
//! offsets do not depend on prompt length. Under the scalar encoding six
//! conditioning rows (five scaled emotion vectors and a gender vector) are
//! prepended to the prompt segment.

use super::params::{LayerIndex, ModelConfig, Params, COND_POSITIONS};
use super::real::{matmul, matmul_a_bt, matmul_at_b, Real};
use super::ModelError;
use crate::prompt::{EmotionWeights, Gender};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;

/// Scalar prompt: emotion weights as fractions of 100, plus gender.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    pub emotion: [f64; 5],
    pub gender: Gender,
}

impl Conditioning {
    pub fn new(weights: &EmotionWeights, gender: Gender) -> Self {
        Self {
            emotion: weights.fractions(),
            gender,
        }
    }
}

/// Special ids implied by a vocabulary size; specials occupy the last three ids.
pub(crate) fn special_ids(vocab_size: usize) -> (TokenId, TokenId) {
    let v = vocab_size as TokenId;
    (v - 3, v - 2)
}

/// `(segment, local position)` for every row, conditioning rows included.
pub(crate) fn segment_positions(tokens: &[TokenId], vocab_size: usize, n_cond: usize) -> Vec<(usize, usize)> {
    let (eop, turn) = special_ids(vocab_size);
    let mut out: Vec<(usize, usize)> = (0..n_cond).map(|i| (0, i)).collect();
    let (mut seg, mut local) = (0usize, n_cond);
    for &t in tokens {
        if t == eop {
            seg = 1;
            local = 0;
        } else if t == turn {
            seg = 2;
            local = 0;
        }
        out.push((seg, local));
        local += 1;
    }
    out
}

pub(crate) fn check_inputs(
    cfg: &ModelConfig,
    tokens: &[TokenId],
    cond: Option<&Conditioning>,
) -> Result<(), ModelError> {
    if tokens.len() > cfg.max_sequence_length {
        return Err(ModelError::Length {
            len: tokens.len(),
            max: cfg.max_sequence_length,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::Config(format!("token id {bad} outside the vocabulary")));
    }
    match (cfg.scalar_conditioning(), cond) {
        (true, None) => Err(ModelError::Conditioning(
            "scalar prompt encoding requires a conditioning vector".into(),
        )),
        (false, Some(_)) => Err(ModelError::Conditioning(
            "text prompt encoding takes its prompt as tokens, not a conditioning vector".into(),
        )),
        _ => Ok(()),
    }
}

/// Builds the input rows (`n × d`).
pub(crate) fn embed<T: Real>(
    p: &Params<T>,
    tokens: &[TokenId],
    cond: Option<&Conditioning>,
    positions: &[(usize, usize)],
) -> Vec<T> {
    let d = p.config.d_model;
    let l = &p.layout;
    let n_cond = if cond.is_some() { COND_POSITIONS } else { 0 };
    let mut x = vec![T::zero(); positions.len() * d];
    for (row, &(seg, local)) in positions.iter().enumerate() {
        let out = &mut x[row * d..(row + 1) * d];
        let pos = &p.data[l.pos_emb.start + local * d..][..d];
        let segv = &p.data[l.seg_emb.start + seg * d..][..d];
        for k in 0..d {
            out[k] = pos[k] + segv[k];
        }
        if row < n_cond {
            let c = cond.expect("conditioning rows imply conditioning");
            let (src, scale) = if row < 5 {
                let r = l.cond_emotion.as_ref().expect("scalar layout");
                (&p.data[r.start + row * d..][..d], T::of(c.emotion[row]))
            } else {
                let r = l.cond_gender.as_ref().expect("scalar layout");
                (&p.data[r.start + c.gender.index() * d..][..d], T::one())
            };
            for k in 0..d {
                out[k] += scale * src[k];
            }
        } else {
            let id = tokens[row - n_cond] as usize;
            let tok = &p.data[l.tok_emb.start + id * d..][..d];
            for k in 0..d {
                out[k] += tok[k];
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) fn layernorm<T: Real>(x: &[T], g: &[T], b: &[T], d: usize, out: &mut [T]) -> LnCache<T> {
    let n = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let inv_d = T::of(1.0 / d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[i] = r;
        for k in 0..d {
            let xh = (row[k] - mean) * r;
            xhat[i * d + k] = xh;
            out[i * d + k] = xh * g[k] + b[k];
        }
    }
    LnCache { xhat, rstd }
}

/// Accumulates into `dx`, `dg`, `db`.
fn layernorm_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    g: &[T],
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let n = dy.len() / d;
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for k in 0..d {
            dg[k] += dyr[k] * xh[k];
            db[k] += dyr[k];
            dxhat[k] = dyr[k] * g[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_xhat += dxhat[k] * xh[k];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = cache.rstd[i];
        for k in 0..d {
            dx[i * d + k] += r * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

fn add_bias<T: Real>(y: &mut [T], b: &[T]) {
    let n = b.len();
    for row in y.chunks_exact_mut(n) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn sum_rows_into<T: Real>(dy: &[T], db: &mut [T]) {
    let n = db.len();
    for row in dy.chunks_exact(n) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Causal multi-head attention over packed `qkv` rows (`n × 3d`).
/// Returns the attention output (`n × d`) and probabilities (`heads × n × n`).
pub(crate) fn attention<T: Real>(qkv: &[T], n: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        for i in 0..n {
            let q = &qkv[i * 3 * d + h * hd..][..hd];
            let p = &mut probs[(h * n + i) * n..][..n];
            let mut max = T::neg_infinity();
            for j in 0..=i {
                let k = &qkv[j * 3 * d + d + h * hd..][..hd];
                p[j] = dot(q, k) * scale;
                max = max.max(p[j]);
            }
            let mut sum = T::zero();
            for pj in p.iter_mut().take(i + 1) {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            let o = &mut out[i * d + h * hd..][..hd];
            for j in 0..=i {
                p[j] /= sum;
                let v = &qkv[j * 3 * d + 2 * d + h * hd..][..hd];
                for c in 0..hd {
                    o[c] += p[j] * v[c];
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Real>(
    datt: &[T],
    qkv: &[T],
    probs: &[T],
    n: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [T],
) {
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        for i in 0..n {
            let p = &probs[(h * n + i) * n..][..n];
            let dout = &datt[i * d + h * hd..][..hd];
            let mut weighted = T::zero();
            for j in 0..=i {
                let v = &qkv[j * 3 * d + 2 * d + h * hd..][..hd];
                dp[j] = dot(dout, v);
                weighted += p[j] * dp[j];
                let dv = &mut dqkv[j * 3 * d + 2 * d + h * hd..][..hd];
                for c in 0..hd {
                    dv[c] += p[j] * dout[c];
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                for c in 0..hd {
                    let qc = qkv[i * 3 * d + h * hd + c];
                    let kc = qkv[j * 3 * d + d + h * hd + c];
                    dqkv[i * 3 * d + h * hd + c] += ds * kc;
                    dqkv[j * 3 * d + d + h * hd + c] += ds * qc;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    h_in: Vec<T>,
    ln1: LnCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2: LnCache<T>,
    m: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

/// Activations of one forward pass, retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    tokens: Vec<TokenId>,
    positions: Vec<(usize, usize)>,
    cond: Option<Conditioning>,
    n_cond: usize,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    zf: Vec<T>,
    /// `len × vocab_size`, one row per input token.
    pub logits: Vec<T>,
}

impl<T: Real> ForwardPass<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize, vocab: usize) -> &[T] {
        &self.logits[i * vocab..(i + 1) * vocab]
    }
}

/// Per-position next-token logits (`len × vocab_size`). Row `i` depends
/// only on tokens `0..=i` and the conditioning vector.
pub fn forward<T: Real>(
    p: &Params<T>,
    tokens: &[TokenId],
    cond: Option<&Conditioning>,
) -> Result<ForwardPass<T>, ModelError> {
    let cfg = &p.config;
    check_inputs(cfg, tokens, cond)?;
    let d = cfg.d_model;
    let ff = cfg.ff_dim();
    let n_cond = if cond.is_some() { COND_POSITIONS } else { 0 };
    let positions = segment_positions(tokens, cfg.vocab_size, n_cond);
    let n = positions.len();
    let data = &p.data;

    let mut h = embed(p, tokens, cond, &positions);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for li in &p.layout.layers {
        let h_in = h.clone();
        let mut a = vec![T::zero(); n * d];
        let ln1 = layernorm(&h, &data[li.ln1_g.clone()], &data[li.ln1_b.clone()], d, &mut a);
        let mut qkv = vec![T::zero(); n * 3 * d];
        matmul(&a, &data[li.w_qkv.clone()], &mut qkv, n, d, 3 * d, false);
        add_bias(&mut qkv, &data[li.b_qkv.clone()]);
        let (att, probs) = attention(&qkv, n, d, cfg.n_heads);
        matmul(&att, &data[li.w_o.clone()], &mut h, n, d, d, true);
        add_bias(&mut h, &data[li.b_o.clone()]);

        let mut m = vec![T::zero(); n * d];
        let ln2 = layernorm(&h, &data[li.ln2_g.clone()], &data[li.ln2_b.clone()], d, &mut m);
        let mut pre = vec![T::zero(); n * ff];
        matmul(&m, &data[li.w_fc.clone()], &mut pre, n, d, ff, false);
        add_bias(&mut pre, &data[li.b_fc.clone()]);
        let act: Vec<T> = pre.iter().map(|&x| gelu(x)).collect();
        matmul(&act, &data[li.w_proj.clone()], &mut h, n, ff, d, true);
        add_bias(&mut h, &data[li.b_proj.clone()]);
        layers.push(LayerCache {
            h_in,
            ln1,
            a,
            qkv,
            probs,
            att,
            ln2,
            m,
            pre,
            act,
        });
    }
    let l = &p.layout;
    let mut zf = vec![T::zero(); n * d];
    let lnf = layernorm(&h, &data[l.lnf_g.clone()], &data[l.lnf_b.clone()], d, &mut zf);
    let v = cfg.vocab_size;
    let len = tokens.len();
    let mut logits = vec![T::zero(); len * v];
    matmul(&zf[n_cond * d..], &data[l.head_w.clone()], &mut logits, len, d, v, false);
    add_bias(&mut logits, &data[l.head_b.clone()]);
    Ok(ForwardPass {
        tokens: tokens.to_vec(),
        positions,
        cond: cond.copied(),
        n_cond,
        layers,
        lnf,
        zf,
        logits,
    })
}

/// Accumulates parameter gradients for `dlogits` (`len × vocab_size`) into
/// `grads`, which shares the layout of `p`.
pub fn backward<T: Real>(p: &Params<T>, fwd: &ForwardPass<T>, dlogits: &[T], grads: &mut [T]) {
    let cfg = &p.config;
    let l = &p.layout;
    let data = &p.data;
    let (d, ff, v) = (cfg.d_model, cfg.ff_dim(), cfg.vocab_size);
    let n = fwd.positions.len();
    let len = fwd.tokens.len();
    let n_cond = fwd.n_cond;
    assert_eq!(dlogits.len(), len * v);
    assert_eq!(grads.len(), data.len());

    matmul_at_b(&fwd.zf[n_cond * d..], dlogits, &mut grads[l.head_w.clone()], len, d, v, true);
    sum_rows_into(dlogits, &mut grads[l.head_b.clone()]);
    let mut dz = vec![T::zero(); n * d];
    matmul_a_bt(dlogits, &data[l.head_w.clone()], &mut dz[n_cond * d..], len, v, d, false);

    let mut dh = vec![T::zero(); n * d];
    let mut dg = vec![T::zero(); d];
    let mut db = vec![T::zero(); d];
    layernorm_backward(&dz, &fwd.lnf, &data[l.lnf_g.clone()], d, &mut dh, &mut dg, &mut db);
    accumulate(&mut grads[l.lnf_g.clone()], &dg);
    accumulate(&mut grads[l.lnf_b.clone()], &db);

    let mut dact = vec![T::zero(); n * ff];
    let mut dm = vec![T::zero(); n * d];
    let mut datt = vec![T::zero(); n * d];
    let mut dqkv = vec![T::zero(); n * 3 * d];
    let mut da = vec![T::zero(); n * d];
    for (li, cache) in l.layers.iter().zip(&fwd.layers).rev() {
        layer_backward(
            cfg, li, cache, data, grads, &mut dh, &mut dact, &mut dm, &mut datt, &mut dqkv, &mut da, n, d, ff,
        );
    }

    // embeddings
    for (row, &(seg, local)) in fwd.positions.iter().enumerate() {
        let g = &dh[row * d..(row + 1) * d];
        accumulate(&mut grads[l.pos_emb.start + local * d..][..d], g);
        accumulate(&mut grads[l.seg_emb.start + seg * d..][..d], g);
        if row < n_cond {
            let c = fwd.cond.as_ref().expect("conditioning present");
            if row < 5 {
                let r = l.cond_emotion.as_ref().expect("scalar layout");
                let s = T::of(c.emotion[row]);
                let dst = &mut grads[r.start + row * d..][..d];
                for k in 0..d {
                    dst[k] += s * g[k];
                }
            } else {
                let r = l.cond_gender.as_ref().expect("scalar layout");
                accumulate(&mut grads[r.start + c.gender.index() * d..][..d], g);
            }
        } else {
            let id = fwd.tokens[row - n_cond] as usize;
            accumulate(&mut grads[l.tok_emb.start + id * d..][..d], g);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_backward<T: Real>(
    cfg: &ModelConfig,
    li: &LayerIndex,
    c: &LayerCache<T>,
    data: &[T],
    grads: &mut [T],
    dh: &mut [T],
    dact: &mut [T],
    dm: &mut [T],
    datt: &mut [T],
    dqkv: &mut [T],
    da: &mut [T],
    n: usize,
    d: usize,
    ff: usize,
) {
    // MLP branch: h += proj(gelu(fc(ln2(h))))
    matmul_at_b(&c.act, dh, &mut grads[li.w_proj.clone()], n, ff, d, true);
    sum_rows_into(dh, &mut grads[li.b_proj.clone()]);
    matmul_a_bt(dh, &data[li.w_proj.clone()], dact, n, d, ff, false);
    for (g, &x) in dact.iter_mut().zip(&c.pre) {
        *g *= gelu_grad(x);
    }
    matmul_at_b(&c.m, dact, &mut grads[li.w_fc.clone()], n, d, ff, true);
    sum_rows_into(dact, &mut grads[li.b_fc.clone()]);
    matmul_a_bt(dact, &data[li.w_fc.clone()], dm, n, ff, d, false);
    let mut dg = vec![T::zero(); d];
    let mut db = vec![T::zero(); d];
    layernorm_backward(dm, &c.ln2, &data[li.ln2_g.clone()], d, dh, &mut dg, &mut db);
    accumulate(&mut grads[li.ln2_g.clone()], &dg);
    accumulate(&mut grads[li.ln2_b.clone()], &db);

    // attention branch: h += out(attn(qkv(ln1(h))))
    matmul_at_b(&c.att, dh, &mut grads[li.w_o.clone()], n, d, d, true);
    sum_rows_into(dh, &mut grads[li.b_o.clone()]);
    matmul_a_bt(dh, &data[li.w_o.clone()], datt, n, d, d, false);
    dqkv.iter_mut().for_each(|x| *x = T::zero());
    attention_backward(datt, &c.qkv, &c.probs, n, d, cfg.n_heads, dqkv);
    matmul_at_b(&c.a, dqkv, &mut grads[li.w_qkv.clone()], n, d, 3 * d, true);
    sum_rows_into(dqkv, &mut grads[li.b_qkv.clone()]);
    matmul_a_bt(dqkv, &data[li.w_qkv.clone()], da, n, 3 * d, d, false);
    dg.iter_mut().for_each(|x| *x = T::zero());
    db.iter_mut().for_each(|x| *x = T::zero());
    layernorm_backward(da, &c.ln1, &data[li.ln1_g.clone()], d, dh, &mut dg, &mut db);
    accumulate(&mut grads[li.ln1_g.clone()], &dg);
    accumulate(&mut grads[li.ln1_b.clone()], &db);
    debug_assert_eq!(c.h_in.len(), n * d);
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
