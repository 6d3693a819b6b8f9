//! Decoder-only transformer over a flat parameter vector, with a hand-written
//! backward pass and cached incremental decoding.
//!
//! Block: pre-RMSNorm multi-head causal attention (no biases), then a
//! pre-RMSNorm SiLU MLP; learned positional embeddings; untied output head.

use std::borrow::Cow;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapter::{Adapters, LoraConfig};
use super::{check_window, pick_token, ends_turn, DecodeConfig, PolicyError, SequenceModel, Tokenizer, BOS};
use crate::scalar::{log_softmax_in_place, Scalar};

const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_PARAM_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub context: usize,
}

impl Arch {
    /// Two layers of width 64 with a 256-token window.
    pub fn small(vocab: usize) -> Self {
        Self { vocab, d_model: 64, n_layers: 2, n_heads: 4, d_mlp: 128, context: 256 }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidArch(m.to_string()));
        if self.vocab < 6 {
            return bad("vocabulary smaller than the reserved tokens");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 || self.context < 2 {
            return bad("zero-sized dimension");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A `rows × cols` row-major tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Span {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }

    fn of<'a, S>(&self, w: &'a [S]) -> &'a [S] {
        &w[self.range()]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSpans {
    pub attn_norm: Span,
    pub wq: Span,
    pub wk: Span,
    pub wv: Span,
    pub wo: Span,
    pub mlp_norm: Span,
    pub w1: Span,
    pub b1: Span,
    pub w2: Span,
    pub b2: Span,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Span,
    pub pos_emb: Span,
    pub layers: Vec<LayerSpans>,
    pub final_norm: Span,
    pub w_out: Span,
    pub b_out: Span,
    pub total: usize,
}

impl Layout {
    pub fn new(a: &Arch) -> Self {
        let mut off = 0;
        let mut span = |rows: usize, cols: usize| {
            let s = Span { off, rows, cols };
            off += rows * cols;
            s
        };
        let (d, m) = (a.d_model, a.d_mlp);
        let tok_emb = span(a.vocab, d);
        let pos_emb = span(a.context, d);
        let layers = (0..a.n_layers)
            .map(|_| LayerSpans {
                attn_norm: span(1, d),
                wq: span(d, d),
                wk: span(d, d),
                wv: span(d, d),
                wo: span(d, d),
                mlp_norm: span(1, d),
                w1: span(d, m),
                b1: span(1, m),
                w2: span(m, d),
                b2: span(1, d),
            })
            .collect();
        let final_norm = span(1, d);
        let w_out = span(d, a.vocab);
        let b_out = span(1, a.vocab);
        Self { tok_emb, pos_emb, layers, final_norm, w_out, b_out, total: off }
    }

    /// Tensor names in storage order.
    pub fn named(&self) -> Vec<(String, Span)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb), ("pos_emb".to_string(), self.pos_emb)];
        for (l, s) in self.layers.iter().enumerate() {
            for (name, span) in [
                ("attn_norm", s.attn_norm),
                ("wq", s.wq),
                ("wk", s.wk),
                ("wv", s.wv),
                ("wo", s.wo),
                ("mlp_norm", s.mlp_norm),
                ("w1", s.w1),
                ("b1", s.b1),
                ("w2", s.w2),
                ("b2", s.b2),
            ] {
                out.push((format!("layers.{l}.{name}"), span));
            }
        }
        out.push(("final_norm".into(), self.final_norm));
        out.push(("w_out".into(), self.w_out));
        out.push(("b_out".into(), self.b_out));
        out
    }
}

// ---- dense kernels (row-major) ----

/// `out[n×m] += x[n×k] · w[k×m]`
fn matmul<S: Scalar>(x: &[S], n: usize, k: usize, w: &[S], m: usize, out: &mut [S]) {
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let oi = &mut out[i * m..(i + 1) * m];
        for (kk, &xv) in xi.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let wr = &w[kk * m..(kk + 1) * m];
            for (o, &wv) in oi.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
}

/// `dx[n×k] += dy[n×m] · wᵀ`
fn matmul_bt<S: Scalar>(dy: &[S], n: usize, m: usize, w: &[S], k: usize, dx: &mut [S]) {
    for i in 0..n {
        let di = &dy[i * m..(i + 1) * m];
        let xi = &mut dx[i * k..(i + 1) * k];
        for (kk, x) in xi.iter_mut().enumerate() {
            let wr = &w[kk * m..(kk + 1) * m];
            let mut acc = S::zero();
            for (&a, &b) in di.iter().zip(wr) {
                acc += a * b;
            }
            *x += acc;
        }
    }
}

/// `dw[k×m] += xᵀ · dy`
fn matmul_at<S: Scalar>(x: &[S], n: usize, k: usize, dy: &[S], m: usize, dw: &mut [S]) {
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let di = &dy[i * m..(i + 1) * m];
        for (kk, &xv) in xi.iter().enumerate() {
            if xv == S::zero() {
                continue;
            }
            let wr = &mut dw[kk * m..(kk + 1) * m];
            for (g, &dv) in wr.iter_mut().zip(di) {
                *g += xv * dv;
            }
        }
    }
}

fn add_bias<S: Scalar>(out: &mut [S], bias: &[S]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<S: Scalar>(dy: &[S], db: &mut [S]) {
    for row in dy.chunks(db.len()) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Row-wise `y = g ⊙ x / rms(x)`; returns `(y, 1/rms)`.
fn rmsnorm<S: Scalar>(x: &[S], d: usize, gain: &[S]) -> (Vec<S>, Vec<S>) {
    let n = x.len() / d;
    let mut y = vec![S::zero(); x.len()];
    let mut inv = Vec::with_capacity(n);
    let eps = S::of(NORM_EPS);
    let dd = S::of_usize(d);
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let ms = xi.iter().map(|&v| v * v).sum::<S>() / dd;
        let r = S::one() / (ms + eps).sqrt();
        for (j, o) in y[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = gain[j] * xi[j] * r;
        }
        inv.push(r);
    }
    (y, inv)
}

fn rmsnorm_back<S: Scalar>(dy: &[S], x: &[S], inv: &[S], d: usize, gain: &[S], dx: &mut [S], dgain: &mut [S]) {
    let dd = S::of_usize(d);
    for (i, &r) in inv.iter().enumerate() {
        let xi = &x[i * d..(i + 1) * d];
        let gi = &dy[i * d..(i + 1) * d];
        let mut dot = S::zero();
        for j in 0..d {
            dgain[j] += gi[j] * xi[j] * r;
            dot += gain[j] * gi[j] * xi[j];
        }
        let c = r * r * r * dot / dd;
        for j in 0..d {
            dx[i * d + j] += r * gain[j] * gi[j] - c * xi[j];
        }
    }
}

fn silu<S: Scalar>(u: S) -> S {
    u / (S::one() + (-u).exp())
}

fn silu_grad<S: Scalar>(u: S) -> S {
    let s = S::one() / (S::one() + (-u).exp());
    s * (S::one() + u * (S::one() - s))
}

/// Causal attention for all heads; returns `(probs[h][i][j], o)`.
fn attention<S: Scalar>(q: &[S], k: &[S], v: &[S], n: usize, a: &Arch) -> (Vec<S>, Vec<S>) {
    let (d, hd) = (a.d_model, a.head_dim());
    let scale = S::one() / S::of_usize(hd).sqrt();
    let mut probs = vec![S::zero(); a.n_heads * n * n];
    let mut o = vec![S::zero(); n * d];
    for h in 0..a.n_heads {
        let c0 = h * hd;
        for i in 0..n {
            let row = &mut probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            let qi = &q[i * d + c0..i * d + c0 + hd];
            for (j, p) in row.iter_mut().enumerate() {
                let kj = &k[j * d + c0..j * d + c0 + hd];
                *p = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<S>() * scale;
            }
            log_softmax_in_place(row);
            for p in row.iter_mut() {
                *p = p.exp();
            }
            let oi = &mut o[i * d + c0..i * d + c0 + hd];
            for (j, &p) in row.iter().enumerate() {
                let vj = &v[j * d + c0..j * d + c0 + hd];
                for (x, &y) in oi.iter_mut().zip(vj) {
                    *x += p * y;
                }
            }
        }
    }
    (probs, o)
}

#[allow(clippy::too_many_arguments)]
fn attention_back<S: Scalar>(
    dout: &[S],
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    n: usize,
    a: &Arch,
    dq: &mut [S],
    dk: &mut [S],
    dv: &mut [S],
) {
    let (d, hd) = (a.d_model, a.head_dim());
    let scale = S::one() / S::of_usize(hd).sqrt();
    let mut dp = vec![S::zero(); n];
    for h in 0..a.n_heads {
        let c0 = h * hd;
        for i in 0..n {
            let row = &probs[(h * n + i) * n..(h * n + i) * n + i + 1];
            let doi = &dout[i * d + c0..i * d + c0 + hd];
            let mut dot = S::zero();
            for (j, &p) in row.iter().enumerate() {
                let vj = &v[j * d + c0..j * d + c0 + hd];
                dp[j] = doi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                dot += p * dp[j];
                let dvj = &mut dv[j * d + c0..j * d + c0 + hd];
                for (g, &x) in dvj.iter_mut().zip(doi) {
                    *g += p * x;
                }
            }
            for (j, &p) in row.iter().enumerate() {
                let ds = p * (dp[j] - dot) * scale;
                if ds == S::zero() {
                    continue;
                }
                for c in 0..hd {
                    dq[i * d + c0 + c] += ds * k[j * d + c0 + c];
                    dk[j * d + c0 + c] += ds * q[i * d + c0 + c];
                }
            }
        }
    }
}

struct LayerTrace<S> {
    h_in: Vec<S>,
    r1: Vec<S>,
    a: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    probs: Vec<S>,
    o: Vec<S>,
    h_mid: Vec<S>,
    r2: Vec<S>,
    b: Vec<S>,
    u: Vec<S>,
    s: Vec<S>,
}

/// Activations of one forward pass, kept for the backward pass.
pub struct Trace<S> {
    tokens: Vec<u32>,
    layers: Vec<LayerTrace<S>>,
    h_final: Vec<S>,
    r_final: Vec<S>,
    f: Vec<S>,
    /// Row `i` holds next-token log-probabilities after `tokens[..=i]`.
    logp: Vec<S>,
    vocab: usize,
}

impl<S: Scalar> Trace<S> {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn next_logprobs(&self, i: usize) -> &[S] {
        &self.logp[i * self.vocab..(i + 1) * self.vocab]
    }

    /// `log p(tokens[p] | tokens[..p])` at every position; entry 0 is zero.
    pub fn position_logprobs(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.tokens.len()];
        for p in 1..self.tokens.len() {
            out[p] = self.logp[(p - 1) * self.vocab + self.tokens[p] as usize];
        }
        out
    }
}

/// Forward/backward kernels bound to one set of effective weights.
pub(crate) struct Net<'a, S> {
    arch: &'a Arch,
    layout: &'a Layout,
    w: &'a [S],
}

impl<'a, S: Scalar> Net<'a, S> {
    pub fn forward(&self, tokens: &[u32]) -> Result<Trace<S>, PolicyError> {
        let a = self.arch;
        let l = self.layout;
        let w = self.w;
        check_window(tokens.len(), a.context)?;
        let (n, d, m, vsz) = (tokens.len(), a.d_model, a.d_mlp, a.vocab);
        let mut h = vec![S::zero(); n * d];
        let tok = l.tok_emb.of(w);
        let pos = l.pos_emb.of(w);
        for (i, &t) in tokens.iter().enumerate() {
            let t = (t as usize).min(vsz - 1);
            for j in 0..d {
                h[i * d + j] = tok[t * d + j] + pos[i * d + j];
            }
        }
        let mut layers = Vec::with_capacity(a.n_layers);
        for s in &l.layers {
            let h_in = h.clone();
            let (an, r1) = rmsnorm(&h, d, s.attn_norm.of(w));
            let mut q = vec![S::zero(); n * d];
            let mut k = vec![S::zero(); n * d];
            let mut v = vec![S::zero(); n * d];
            matmul(&an, n, d, s.wq.of(w), d, &mut q);
            matmul(&an, n, d, s.wk.of(w), d, &mut k);
            matmul(&an, n, d, s.wv.of(w), d, &mut v);
            let (probs, o) = attention(&q, &k, &v, n, a);
            matmul(&o, n, d, s.wo.of(w), d, &mut h);
            let h_mid = h.clone();
            let (b, r2) = rmsnorm(&h, d, s.mlp_norm.of(w));
            let mut u = vec![S::zero(); n * m];
            matmul(&b, n, d, s.w1.of(w), m, &mut u);
            add_bias(&mut u, s.b1.of(w));
            let act: Vec<S> = u.iter().map(|&x| silu(x)).collect();
            matmul(&act, n, m, s.w2.of(w), d, &mut h);
            add_bias(&mut h, s.b2.of(w));
            layers.push(LayerTrace { h_in, r1, a: an, q, k, v, probs, o, h_mid, r2, b, u, s: act });
        }
        let (f, r_final) = rmsnorm(&h, d, l.final_norm.of(w));
        let mut logp = vec![S::zero(); n * vsz];
        matmul(&f, n, d, l.w_out.of(w), vsz, &mut logp);
        add_bias(&mut logp, l.b_out.of(w));
        for row in logp.chunks_mut(vsz) {
            log_softmax_in_place(row);
        }
        Ok(Trace { tokens: tokens.to_vec(), layers, h_final: h, r_final, f, logp, vocab: vsz })
    }

    /// Accumulates into `grad` the gradient of `-Σ_p weights[p] · log p(tokens[p] | tokens[..p])`.
    pub fn backward(&self, tr: &Trace<S>, weights: &[S], grad: &mut [S]) {
        let a = self.arch;
        let l = self.layout;
        let w = self.w;
        let (n, d, m, vsz) = (tr.tokens.len(), a.d_model, a.d_mlp, a.vocab);
        let mut dlogits = vec![S::zero(); n * vsz];
        for p in 1..n {
            let wt = weights[p];
            if wt == S::zero() {
                continue;
            }
            let row = &mut dlogits[(p - 1) * vsz..p * vsz];
            let lp = &tr.logp[(p - 1) * vsz..p * vsz];
            for (g, &v) in row.iter_mut().zip(lp) {
                *g += wt * v.exp();
            }
            row[(tr.tokens[p] as usize).min(vsz - 1)] -= wt;
        }
        bias_grad(&dlogits, &mut grad[l.b_out.range()]);
        matmul_at(&tr.f, n, d, &dlogits, vsz, &mut grad[l.w_out.range()]);
        let mut df = vec![S::zero(); n * d];
        matmul_bt(&dlogits, n, vsz, l.w_out.of(w), d, &mut df);
        let mut dh = vec![S::zero(); n * d];
        rmsnorm_back(&df, &tr.h_final, &tr.r_final, d, l.final_norm.of(w), &mut dh, &mut grad[l.final_norm.range()]);

        for (s, t) in l.layers.iter().zip(&tr.layers).rev() {
            // MLP residual branch.
            bias_grad(&dh, &mut grad[s.b2.range()]);
            matmul_at(&t.s, n, m, &dh, d, &mut grad[s.w2.range()]);
            let mut du = vec![S::zero(); n * m];
            matmul_bt(&dh, n, d, s.w2.of(w), m, &mut du);
            for (g, &u) in du.iter_mut().zip(&t.u) {
                *g *= silu_grad(u);
            }
            bias_grad(&du, &mut grad[s.b1.range()]);
            matmul_at(&t.b, n, d, &du, m, &mut grad[s.w1.range()]);
            let mut db = vec![S::zero(); n * d];
            matmul_bt(&du, n, m, s.w1.of(w), d, &mut db);
            rmsnorm_back(&db, &t.h_mid, &t.r2, d, s.mlp_norm.of(w), &mut dh, &mut grad[s.mlp_norm.range()]);

            // Attention residual branch.
            matmul_at(&t.o, n, d, &dh, d, &mut grad[s.wo.range()]);
            let mut d_o = vec![S::zero(); n * d];
            matmul_bt(&dh, n, d, s.wo.of(w), d, &mut d_o);
            let mut dq = vec![S::zero(); n * d];
            let mut dk = vec![S::zero(); n * d];
            let mut dv = vec![S::zero(); n * d];
            attention_back(&d_o, &t.q, &t.k, &t.v, &t.probs, n, a, &mut dq, &mut dk, &mut dv);
            let mut da = vec![S::zero(); n * d];
            for (dx, span) in [(&dq, s.wq), (&dk, s.wk), (&dv, s.wv)] {
                matmul_at(&t.a, n, d, dx, d, &mut grad[span.range()]);
                matmul_bt(dx, n, d, span.of(w), d, &mut da);
            }
            rmsnorm_back(&da, &t.h_in, &t.r1, d, s.attn_norm.of(w), &mut dh, &mut grad[s.attn_norm.range()]);
        }

        let tok_off = l.tok_emb.off;
        let pos_off = l.pos_emb.off;
        for (i, &tkn) in tr.tokens.iter().enumerate() {
            let tkn = (tkn as usize).min(vsz - 1);
            for j in 0..d {
                grad[tok_off + tkn * d + j] += dh[i * d + j];
                grad[pos_off + i * d + j] += dh[i * d + j];
            }
        }
    }

    /// Greedy or sampled continuation using cached keys and values.
    pub fn generate(&self, context: &[u32], decode: &DecodeConfig) -> Result<Vec<u32>, PolicyError> {
        let a = self.arch;
        let mut cache = KvCache::new(a);
        let mut row = Vec::new();
        for &t in context {
            row = self.step(&mut cache, t);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
        let mut out = Vec::new();
        while out.len() < decode.max_tokens && cache.len < a.context {
            let id = pick_token(&row, decode, &mut rng);
            if ends_turn(id) {
                break;
            }
            out.push(id);
            if cache.len == a.context {
                break;
            }
            row = self.step(&mut cache, id);
        }
        Ok(out)
    }

    fn step(&self, cache: &mut KvCache<S>, token: u32) -> Vec<S> {
        let a = self.arch;
        let l = self.layout;
        let w = self.w;
        let (d, m, vsz, hd) = (a.d_model, a.d_mlp, a.vocab, a.head_dim());
        let pos = cache.len;
        let t = (token as usize).min(vsz - 1);
        let mut x: Vec<S> = (0..d).map(|j| l.tok_emb.of(w)[t * d + j] + l.pos_emb.of(w)[pos * d + j]).collect();
        let scale = S::one() / S::of_usize(hd).sqrt();
        for (li, s) in l.layers.iter().enumerate() {
            let (an, _) = rmsnorm(&x, d, s.attn_norm.of(w));
            let mut q = vec![S::zero(); d];
            matmul(&an, 1, d, s.wq.of(w), d, &mut q);
            let keys = &mut cache.keys[li];
            let vals = &mut cache.values[li];
            let start = keys.len();
            keys.resize(start + d, S::zero());
            vals.resize(start + d, S::zero());
            matmul(&an, 1, d, s.wk.of(w), d, &mut keys[start..]);
            matmul(&an, 1, d, s.wv.of(w), d, &mut vals[start..]);
            let n = pos + 1;
            let mut o = vec![S::zero(); d];
            let mut row = vec![S::zero(); n];
            for h in 0..a.n_heads {
                let c0 = h * hd;
                for (j, p) in row.iter_mut().enumerate() {
                    let kj = &keys[j * d + c0..j * d + c0 + hd];
                    *p = q[c0..c0 + hd].iter().zip(kj).map(|(&x, &y)| x * y).sum::<S>() * scale;
                }
                log_softmax_in_place(&mut row);
                for (j, p) in row.iter().enumerate() {
                    let p = p.exp();
                    for c in 0..hd {
                        o[c0 + c] += p * vals[j * d + c0 + c];
                    }
                }
            }
            matmul(&o, 1, d, s.wo.of(w), d, &mut x);
            let (b, _) = rmsnorm(&x, d, s.mlp_norm.of(w));
            let mut u = s.b1.of(w).to_vec();
            matmul(&b, 1, d, s.w1.of(w), m, &mut u);
            let act: Vec<S> = u.iter().map(|&v| silu(v)).collect();
            matmul(&act, 1, m, s.w2.of(w), d, &mut x);
            add_bias(&mut x, s.b2.of(w));
        }
        cache.len += 1;
        let (f, _) = rmsnorm(&x, d, l.final_norm.of(w));
        let mut logits = l.b_out.of(w).to_vec();
        matmul(&f, 1, d, l.w_out.of(w), vsz, &mut logits);
        log_softmax_in_place(&mut logits);
        logits
    }
}

struct KvCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    fn new(a: &Arch) -> Self {
        Self { keys: vec![Vec::new(); a.n_layers], values: vec![Vec::new(); a.n_layers], len: 0 }
    }
}

/// Gradient with respect to the base parameters and, when adapters are
/// attached, the adapter parameters. Base entries are all zero while
/// adapters are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    pub base: Vec<S>,
    pub adapter: Option<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    /// The entries that training updates.
    pub fn trainable(&self) -> &[S] {
        self.adapter.as_deref().unwrap_or(&self.base)
    }

    pub fn trainable_mut(&mut self) -> &mut [S] {
        match &mut self.adapter {
            Some(a) => a,
            None => &mut self.base,
        }
    }

    pub fn norm(&self) -> S {
        self.trainable().iter().map(|&g| g * g).sum::<S>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Grads<S>) {
        for (a, &b) in self.base.iter_mut().zip(&other.base) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.adapter, &other.adapter) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.base.iter_mut() {
            *g *= c;
        }
        if let Some(a) = &mut self.adapter {
            for g in a.iter_mut() {
                *g *= c;
            }
        }
    }
}

/// Token sequences with per-position loss weights. Sequences that are
/// prefixes of one another are evaluated in a single forward pass.
#[derive(Debug, Clone, Default)]
pub struct TokenBatch<S> {
    entries: Vec<Entry<S>>,
}

#[derive(Debug, Clone)]
struct Entry<S> {
    tokens: Vec<u32>,
    from: usize,
    /// Weight per scored position, aligned with `tokens[from..]`.
    weights: Vec<S>,
}

/// Packed sequences plus, for each original entry, the packed row holding it.
pub(crate) struct Packed<S> {
    pub seqs: Vec<Vec<u32>>,
    pub weights: Vec<Vec<S>>,
    pub owner: Vec<usize>,
}

impl<S: Scalar> TokenBatch<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `context ++ target`, scoring target tokens with `weight` each.
    /// An empty context becomes a lone `BOS`. Returns the entry index.
    pub fn push(&mut self, context: &[u32], target: &[u32], weight: S) -> usize {
        self.push_weighted(context, target, vec![weight; target.len()])
    }

    pub fn push_weighted(&mut self, context: &[u32], target: &[u32], weights: Vec<S>) -> usize {
        assert_eq!(target.len(), weights.len(), "one weight per target token");
        let mut tokens = if context.is_empty() { vec![BOS] } else { context.to_vec() };
        let from = tokens.len();
        tokens.extend_from_slice(target);
        self.entries.push(Entry { tokens, from, weights });
        self.entries.len() - 1
    }

    pub fn set_weights(&mut self, index: usize, weights: Vec<S>) {
        assert_eq!(self.entries[index].weights.len(), weights.len());
        self.entries[index].weights = weights;
    }

    pub fn target_len(&self, index: usize) -> usize {
        self.entries[index].weights.len()
    }

    pub(crate) fn pack(&self) -> Packed<S> {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| self.entries[a].tokens.cmp(&self.entries[b].tokens).then(a.cmp(&b)));
        let mut seqs: Vec<Vec<u32>> = Vec::new();
        let mut owner = vec![0; self.entries.len()];
        for &i in &order {
            let t = &self.entries[i].tokens;
            match seqs.last_mut() {
                Some(last) if t.starts_with(last) => *last = t.clone(),
                _ => seqs.push(t.clone()),
            }
            owner[i] = seqs.len() - 1;
        }
        let mut weights: Vec<Vec<S>> = seqs.iter().map(|s| vec![S::zero(); s.len()]).collect();
        for (i, e) in self.entries.iter().enumerate() {
            for (k, &w) in e.weights.iter().enumerate() {
                weights[owner[i]][e.from + k] += w;
            }
        }
        Packed { seqs, weights, owner }
    }

    /// Per-entry sums of target log-probabilities, given per-position
    /// log-probabilities of each packed row.
    pub(crate) fn entry_logprobs(&self, packed: &Packed<S>, rows: &[Vec<S>]) -> Vec<S> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| rows[packed.owner[i]][e.from..e.tokens.len()].iter().copied().sum())
            .collect()
    }
}

/// The trainable policy.
#[derive(Debug, Clone)]
pub struct PolicyModel<S> {
    arch: Arch,
    layout: Arc<Layout>,
    tokenizer: Arc<Tokenizer>,
    params: Vec<S>,
    adapters: Option<Adapters<S>>,
}

impl<S: Scalar> PolicyModel<S> {
    /// Randomly initialized model; `arch.vocab` is taken from the tokenizer.
    pub fn new(arch: Arch, tokenizer: Tokenizer, seed: u64) -> Result<Self, PolicyError> {
        Self::with_budget(arch, tokenizer, seed, DEFAULT_PARAM_BUDGET)
    }

    pub fn with_budget(mut arch: Arch, tokenizer: Tokenizer, seed: u64, budget: usize) -> Result<Self, PolicyError> {
        let mut m = Self::zeros_with_budget(&mut arch, tokenizer, budget)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
        let emb = normal(0.1);
        let l = m.layout.clone();
        let mut fill = |span: Span, dist: &Normal<f64>, p: &mut [S]| {
            for v in &mut p[span.range()] {
                *v = S::of(dist.sample(&mut rng));
            }
        };
        let proj = normal(1.0 / (arch.d_model as f64).sqrt());
        let down = normal(1.0 / (arch.d_mlp as f64).sqrt() / (2.0 * arch.n_layers as f64).sqrt());
        let resid = normal(1.0 / (arch.d_model as f64).sqrt() / (2.0 * arch.n_layers as f64).sqrt());
        fill(l.tok_emb, &emb, &mut m.params);
        fill(l.pos_emb, &emb, &mut m.params);
        for s in &l.layers {
            for span in [s.wq, s.wk, s.wv, s.w1] {
                fill(span, &proj, &mut m.params);
            }
            fill(s.wo, &resid, &mut m.params);
            fill(s.w2, &down, &mut m.params);
        }
        fill(l.w_out, &proj, &mut m.params);
        Ok(m)
    }

    /// All weights zero except unit norm gains.
    pub fn zeros(mut arch: Arch, tokenizer: Tokenizer) -> Result<Self, PolicyError> {
        Self::zeros_with_budget(&mut arch, tokenizer, DEFAULT_PARAM_BUDGET)
    }

    fn zeros_with_budget(arch: &mut Arch, tokenizer: Tokenizer, budget: usize) -> Result<Self, PolicyError> {
        arch.vocab = tokenizer.len();
        arch.validate()?;
        let layout = Layout::new(arch);
        if layout.total > budget {
            return Err(PolicyError::OverBudget { params: layout.total, budget });
        }
        let mut params = vec![S::zero(); layout.total];
        let mut gains = vec![layout.final_norm];
        for s in &layout.layers {
            gains.push(s.attn_norm);
            gains.push(s.mlp_norm);
        }
        for g in gains {
            params[g.range()].fill(S::one());
        }
        Ok(Self { arch: *arch, layout: Arc::new(layout), tokenizer: Arc::new(tokenizer), params, adapters: None })
    }

    pub(crate) fn from_parts(arch: Arch, tokenizer: Tokenizer, params: Vec<S>) -> Result<Self, PolicyError> {
        let mut a = arch;
        let mut m = Self::zeros_with_budget(&mut a, tokenizer, usize::MAX)?;
        if params.len() != m.params.len() {
            return Err(PolicyError::InvalidArch(format!(
                "expected {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Base parameters, never modified while adapters are attached.
    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    /// `(name, shape, base weights)` for every tensor.
    pub fn named_tensors(&self) -> Vec<(String, [usize; 2], &[S])> {
        self.layout
            .named()
            .into_iter()
            .map(|(n, s)| (n, [s.rows, s.cols], &self.params[s.range()]))
            .collect()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn attach_adapters(&mut self, config: LoraConfig, seed: u64) -> Result<(), PolicyError> {
        self.adapters = Some(Adapters::new(config, &self.layout, seed)?);
        Ok(())
    }

    pub(crate) fn set_adapters(&mut self, adapters: Option<Adapters<S>>) {
        self.adapters = adapters;
    }

    pub(crate) fn adapters(&self) -> Option<&Adapters<S>> {
        self.adapters.as_ref()
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.adapters.as_ref().map(|a| &a.config)
    }

    /// Folds the adapters into the base weights and drops them.
    pub fn merge_adapters(&mut self) {
        if let Some(ad) = self.adapters.take() {
            self.params = ad.apply(&self.params);
        }
    }

    /// Parameters that training updates: adapters if attached, else the base.
    pub fn trainable(&self) -> &[S] {
        match &self.adapters {
            Some(a) => &a.params,
            None => &self.params,
        }
    }

    pub fn trainable_mut(&mut self) -> &mut [S] {
        match &mut self.adapters {
            Some(a) => &mut a.params,
            None => &mut self.params,
        }
    }

    pub fn effective_weights(&self) -> Cow<'_, [S]> {
        match &self.adapters {
            Some(a) => Cow::Owned(a.apply(&self.params)),
            None => Cow::Borrowed(&self.params),
        }
    }

    pub(crate) fn net<'a>(&'a self, w: &'a [S]) -> Net<'a, S> {
        Net { arch: &self.arch, layout: &self.layout, w }
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Trace<S>, PolicyError> {
        let w = self.effective_weights();
        self.net(&w).forward(tokens)
    }

    fn finish_grads(&self, grad_eff: Vec<S>) -> Grads<S> {
        match &self.adapters {
            Some(a) => {
                let adapter = a.project(&grad_eff);
                Grads { base: vec![S::zero(); self.params.len()], adapter: Some(adapter) }
            }
            None => Grads { base: grad_eff, adapter: None },
        }
    }

    /// Target log-probability sums of every batch entry.
    pub fn batch_logprobs(&self, batch: &TokenBatch<S>) -> Result<Vec<S>, PolicyError> {
        let w = self.effective_weights();
        let net = self.net(&w);
        let packed = batch.pack();
        let rows = packed
            .seqs
            .par_iter()
            .map(|s| net.forward(s).map(|t| t.position_logprobs()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(batch.entry_logprobs(&packed, &rows))
    }

    /// Loss `-Σ weight · log p(token)` over all scored positions of the
    /// batch, and its exact gradient.
    pub fn weighted_nll(&self, batch: &TokenBatch<S>) -> Result<(S, Grads<S>), PolicyError> {
        let w = self.effective_weights();
        let net = self.net(&w);
        let packed = batch.pack();
        let parts = packed
            .seqs
            .par_iter()
            .zip(&packed.weights)
            .map(|(s, wt)| {
                let tr = net.forward(s)?;
                let lp = tr.position_logprobs();
                let loss: S = -lp.iter().zip(wt).map(|(&a, &b)| a * b).sum::<S>();
                let mut g = vec![S::zero(); w.len()];
                net.backward(&tr, wt, &mut g);
                Ok((loss, g))
            })
            .collect::<Result<Vec<_>, PolicyError>>()?;
        let mut total = vec![S::zero(); w.len()];
        let mut loss = S::zero();
        for (l, g) in parts {
            loss += l;
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        if !loss.is_finite() {
            return Err(PolicyError::NonFiniteLoss);
        }
        Ok((loss, self.finish_grads(total)))
    }

    /// Loss and gradient where position weights depend on the batch's own
    /// log-probabilities: `weigh` receives per-entry target log-probability
    /// sums and returns `(loss, per-entry weight vectors)`.
    pub fn weighted_nll_with<F>(&self, batch: &mut TokenBatch<S>, weigh: F) -> Result<(S, Grads<S>), PolicyError>
    where
        F: FnOnce(&[S], &TokenBatch<S>) -> (S, Vec<Vec<S>>),
    {
        let w = self.effective_weights();
        let net = self.net(&w);
        let packed = batch.pack();
        let traces = packed.seqs.par_iter().map(|s| net.forward(s)).collect::<Result<Vec<_>, _>>()?;
        let rows: Vec<Vec<S>> = traces.iter().map(|t| t.position_logprobs()).collect();
        let lps = batch.entry_logprobs(&packed, &rows);
        let (loss, weights) = weigh(&lps, batch);
        if !loss.is_finite() {
            return Err(PolicyError::NonFiniteLoss);
        }
        for (i, wv) in weights.into_iter().enumerate() {
            batch.set_weights(i, wv);
        }
        let packed = batch.pack();
        let parts = traces
            .par_iter()
            .zip(&packed.weights)
            .map(|(tr, wt)| {
                let mut g = vec![S::zero(); w.len()];
                net.backward(tr, wt, &mut g);
                g
            })
            .collect::<Vec<_>>();
        let mut total = vec![S::zero(); w.len()];
        for g in parts {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok((loss, self.finish_grads(total)))
    }

    /// Frozen copy of the current effective weights.
    pub fn snapshot_reference(&self) -> ReferencePolicy<S> {
        let mut frozen = self.clone();
        frozen.merge_adapters();
        ReferencePolicy { model: Arc::new(frozen) }
    }

    /// Same model in another scalar type.
    pub fn cast<T: Scalar>(&self) -> PolicyModel<T> {
        let mut m = self.clone();
        m.merge_adapters();
        PolicyModel {
            arch: m.arch,
            layout: m.layout,
            tokenizer: m.tokenizer,
            params: m.params.iter().map(|v| T::of(v.f64())).collect(),
            adapters: None,
        }
    }
}

impl<S: Scalar> SequenceModel<S> for PolicyModel<S> {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn context_window(&self) -> usize {
        self.arch.context
    }

    fn token_logprobs(&self, tokens: &[u32], from: usize) -> Result<Vec<S>, PolicyError> {
        assert!(from >= 1, "position 0 has no prefix");
        let tr = self.forward(tokens)?;
        Ok(tr.position_logprobs()[from.min(tokens.len())..].to_vec())
    }

    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<S>, PolicyError> {
        let prefix = if prefix.is_empty() { &[BOS][..] } else { prefix };
        let tr = self.forward(prefix)?;
        Ok(tr.next_logprobs(prefix.len() - 1).to_vec())
    }

    fn sample(&self, context: &[u32], decode: &DecodeConfig) -> Result<Vec<u32>, PolicyError> {
        decode.validate()?;
        let context = if context.is_empty() { &[BOS][..] } else { context };
        check_window(context.len() + 1, self.arch.context)?;
        let w = self.effective_weights();
        self.net(&w).generate(context, decode)
    }
}

/// Frozen policy anchoring the preference reward.
#[derive(Debug, Clone)]
pub struct ReferencePolicy<S> {
    model: Arc<PolicyModel<S>>,
}

impl<S: Scalar> ReferencePolicy<S> {
    pub fn model(&self) -> &PolicyModel<S> {
        &self.model
    }

    pub fn snapshot(&self) -> ReferencePolicy<S> {
        self.model.snapshot_reference()
    }

    pub fn batch_logprobs(&self, batch: &TokenBatch<S>) -> Result<Vec<S>, PolicyError> {
        self.model.batch_logprobs(batch)
    }
}

impl<S: Scalar> SequenceModel<S> for ReferencePolicy<S> {
    fn tokenizer(&self) -> &Tokenizer {
        self.model.tokenizer()
    }

    fn context_window(&self) -> usize {
        self.model.context_window()
    }

    fn token_logprobs(&self, tokens: &[u32], from: usize) -> Result<Vec<S>, PolicyError> {
        self.model.token_logprobs(tokens, from)
    }

    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<S>, PolicyError> {
        self.model.next_logprobs(prefix)
    }

    fn sample(&self, context: &[u32], decode: &DecodeConfig) -> Result<Vec<u32>, PolicyError> {
        self.model.sample(context, decode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::logprob;
    use crate::text::Scheme;

    pub(crate) fn tiny_tokenizer() -> Tokenizer {
        Tokenizer::build(["a b c d e f g h i j k l m n"], Scheme::Word)
    }

    pub(crate) fn tiny_arch() -> Arch {
        Arch { vocab: 0, d_model: 8, n_layers: 2, n_heads: 2, d_mlp: 12, context: 16 }
    }

    fn tiny(seed: u64) -> PolicyModel<f64> {
        PolicyModel::new(tiny_arch(), tiny_tokenizer(), seed).unwrap()
    }

    #[test]
    fn rows_are_normalized() {
        let m = tiny(1);
        let tr = m.forward(&[1, 6, 7, 8, 9]).unwrap();
        for i in 0..5 {
            let s: f64 = tr.next_logprobs(i).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let m = tiny(1);
        let long = vec![6u32; 17];
        assert!(matches!(m.forward(&long), Err(PolicyError::ContextOverflow { len: 17, window: 16 })));
        assert!(m.sample(&long[..16], &DecodeConfig::greedy(3)).is_err());
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let m = tiny(2);
        let ctx = [1u32, 4, 6, 7, 2, 5];
        let w = m.effective_weights();
        let net = m.net(&w);
        let mut cache = KvCache::new(&m.arch);
        let full = m.forward(&ctx).unwrap();
        for (i, &t) in ctx.iter().enumerate() {
            let row = net.step(&mut cache, t);
            for (a, b) in row.iter().zip(full.next_logprobs(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn greedy_sample_follows_argmax() {
        let m = tiny(3);
        let ctx = vec![1u32, 4, 6, 2, 5];
        let out = m.sample(&ctx, &DecodeConfig::greedy(5)).unwrap();
        let mut seq = ctx.clone();
        for &t in &out {
            let row = m.next_logprobs(&seq).unwrap();
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(best as u32, t);
            seq.push(t);
        }
    }

    #[test]
    fn packing_merges_prefixes_and_keeps_logprobs() {
        let m = tiny(4);
        let mut batch = TokenBatch::new();
        batch.push(&[1, 6], &[7, 8], 1.0);
        batch.push(&[1, 6, 7, 8], &[9], 1.0);
        batch.push(&[1, 6], &[10], 1.0);
        let packed = batch.pack();
        assert_eq!(packed.seqs.len(), 2);
        let lps = m.batch_logprobs(&batch).unwrap();
        assert!((lps[0] - logprob(&m, &[1, 6], &[7, 8]).unwrap()).abs() < 1e-12);
        assert!((lps[1] - logprob(&m, &[1, 6, 7, 8], &[9]).unwrap()).abs() < 1e-12);
        assert!((lps[2] - logprob(&m, &[1, 6], &[10]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = tiny(5);
        let mut batch = TokenBatch::new();
        batch.push(&[1, 6, 7], &[8, 9, 2], 0.7);
        batch.push(&[1, 10], &[11], -0.4);
        let (_, g) = m.weighted_nll(&batch).unwrap();
        let h = 1e-5;
        for idx in (0..m.param_count()).step_by(7) {
            let orig = m.params[idx];
            m.params[idx] = orig + h;
            let up = m.weighted_nll(&batch).unwrap().0;
            m.params[idx] = orig - h;
            let down = m.weighted_nll(&batch).unwrap().0;
            m.params[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.base[idx]).abs() < 1e-7 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", g.base[idx]);
        }
    }

    #[test]
    fn duplicated_entry_doubles_gradient() {
        let m = tiny(6);
        let mut one = TokenBatch::new();
        one.push(&[1, 6], &[7, 2], 1.0);
        let mut two = one.clone();
        two.push(&[1, 6], &[7, 2], 1.0);
        let (l1, g1) = m.weighted_nll(&one).unwrap();
        let (l2, g2) = m.weighted_nll(&two).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g1.base.iter().zip(&g2.base) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut m = tiny(7);
        let snap = m.snapshot_reference();
        let probe = (vec![1u32, 6, 7], vec![8u32, 2]);
        let before = logprob(&snap, &probe.0, &probe.1).unwrap();
        for v in m.params_mut() {
            *v += 0.01;
        }
        assert_eq!(logprob(&snap, &probe.0, &probe.1).unwrap().to_bits(), before.to_bits());
        let snap2 = snap.snapshot();
        assert_eq!(logprob(&snap2, &probe.0, &probe.1).unwrap().to_bits(), before.to_bits());
    }

    #[test]
    fn budget_is_enforced() {
        let r = PolicyModel::<f64>::with_budget(tiny_arch(), tiny_tokenizer(), 0, 100);
        assert!(matches!(r, Err(PolicyError::OverBudget { .. })));
    }

    #[test]
    fn f32_model_runs() {
        let m: PolicyModel<f32> = tiny(8).cast();
        let lp = logprob(&m, &[1, 6], &[7]).unwrap();
        assert!(lp < 0.0 && lp.is_finite());
    }
}
