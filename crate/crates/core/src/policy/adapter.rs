//! Low-rank adapters: `W' = W + (alpha / rank) · A · B` on selected
//! projection matrices, with `B` initialised to zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::{Layout, Span};
use super::PolicyError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Query,
    Key,
    Value,
    Output,
    MlpIn,
    MlpOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<AdapterTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec![AdapterTarget::Query, AdapterTarget::Key, AdapterTarget::Value, AdapterTarget::Output],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Slot {
    base: Span,
    a: Span,
    b: Span,
}

#[derive(Debug, Clone)]
pub(crate) struct Adapters<S> {
    pub config: LoraConfig,
    slots: Vec<Slot>,
    pub params: Vec<S>,
}

impl<S: Scalar> Adapters<S> {
    pub fn new(config: LoraConfig, layout: &Layout, seed: u64) -> Result<Self, PolicyError> {
        let mut ad = Self::zeros(config, layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in &ad.slots {
            let dist = Normal::new(0.0, 1.0 / (slot.base.rows as f64).sqrt()).expect("positive std");
            for v in &mut ad.params[slot.a.range()] {
                *v = S::of(dist.sample(&mut rng));
            }
        }
        Ok(ad)
    }

    pub fn zeros(config: LoraConfig, layout: &Layout) -> Result<Self, PolicyError> {
        if config.rank == 0 || !(config.alpha > 0.0) {
            return Err(PolicyError::InvalidArch("adapter rank and alpha must be positive".into()));
        }
        let mut off = 0;
        let mut slots = Vec::new();
        for l in &layout.layers {
            for t in &config.targets {
                let base = match t {
                    AdapterTarget::Query => l.wq,
                    AdapterTarget::Key => l.wk,
                    AdapterTarget::Value => l.wv,
                    AdapterTarget::Output => l.wo,
                    AdapterTarget::MlpIn => l.w1,
                    AdapterTarget::MlpOut => l.w2,
                };
                let a = Span { off, rows: base.rows, cols: config.rank };
                off += a.len();
                let b = Span { off, rows: config.rank, cols: base.cols };
                off += b.len();
                slots.push(Slot { base, a, b });
            }
        }
        Ok(Self { config, slots, params: vec![S::zero(); off] })
    }

    fn scale(&self) -> S {
        S::of(self.config.alpha / self.config.rank as f64)
    }

    /// Base weights with every adapter product added.
    pub fn apply(&self, base: &[S]) -> Vec<S> {
        let mut w = base.to_vec();
        let c = self.scale();
        let r = self.config.rank;
        for s in &self.slots {
            let (a, b) = (&self.params[s.a.range()], &self.params[s.b.range()]);
            let out = &mut w[s.base.range()];
            for i in 0..s.base.rows {
                for k in 0..r {
                    let aik = a[i * r + k] * c;
                    if aik == S::zero() {
                        continue;
                    }
                    for j in 0..s.base.cols {
                        out[i * s.base.cols + j] += aik * b[k * s.base.cols + j];
                    }
                }
            }
        }
        w
    }

    /// Chain rule from effective-weight gradients to adapter gradients:
    /// `dA = c · dW · Bᵀ`, `dB = c · Aᵀ · dW`.
    pub fn project(&self, grad_eff: &[S]) -> Vec<S> {
        let mut g = vec![S::zero(); self.params.len()];
        let c = self.scale();
        let r = self.config.rank;
        for s in &self.slots {
            let dw = &grad_eff[s.base.range()];
            let cols = s.base.cols;
            for i in 0..s.base.rows {
                for k in 0..r {
                    let mut acc = S::zero();
                    for j in 0..cols {
                        acc += dw[i * cols + j] * self.params[s.b.off + k * cols + j];
                    }
                    g[s.a.off + i * r + k] += c * acc;
                    let aik = self.params[s.a.off + i * r + k] * c;
                    for j in 0..cols {
                        g[s.b.off + k * cols + j] += aik * dw[i * cols + j];
                    }
                }
            }
        }
        g
    }

    /// `(name, shape, values)` of every adapter matrix.
    pub fn named(&self, layer_of: impl Fn(usize) -> String) -> Vec<(String, [usize; 2], &[S])> {
        let per_layer = self.config.targets.len();
        let mut out = Vec::new();
        for (i, s) in self.slots.iter().enumerate() {
            let t = &self.config.targets[i % per_layer];
            let stem = format!("{}.{:?}", layer_of(i / per_layer), t).to_lowercase();
            out.push((format!("{stem}.lora_a"), [s.a.rows, s.a.cols], &self.params[s.a.range()]));
            out.push((format!("{stem}.lora_b"), [s.b.rows, s.b.cols], &self.params[s.b.range()]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{logprob, PolicyModel, TokenBatch, Tokenizer};
    use crate::text::Scheme;

    fn model() -> PolicyModel<f64> {
        let tok = Tokenizer::build(["a b c d e f g h"], Scheme::Word);
        let arch = crate::policy::Arch { vocab: 0, d_model: 8, n_layers: 1, n_heads: 2, d_mlp: 8, context: 12 };
        PolicyModel::new(arch, tok, 9).unwrap()
    }

    #[test]
    fn fresh_adapters_do_not_change_outputs() {
        let mut m = model();
        let before = logprob(&m, &[1, 6, 7], &[8, 2]).unwrap();
        m.attach_adapters(LoraConfig::default(), 1).unwrap();
        assert_eq!(logprob(&m, &[1, 6, 7], &[8, 2]).unwrap(), before);
    }

    #[test]
    fn base_gradient_is_zero_and_adapter_gradient_is_exact() {
        let mut m = model();
        let cfg = LoraConfig { rank: 2, alpha: 4.0, targets: vec![AdapterTarget::Query, AdapterTarget::MlpOut] };
        m.attach_adapters(cfg, 3).unwrap();
        // Move B away from zero so both factors get non-trivial gradients.
        for (i, v) in m.trainable_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i % 7) as f64 - 3.0);
        }
        let base_before = m.params().to_vec();
        let mut batch = TokenBatch::new();
        batch.push(&[1, 6, 7], &[8, 9, 2], 1.0);
        let (_, g) = m.weighted_nll(&batch).unwrap();
        assert!(g.base.iter().all(|&v| v == 0.0));
        let ga = g.adapter.clone().unwrap();
        let h = 1e-6;
        for idx in 0..m.trainable().len() {
            let orig = m.trainable()[idx];
            m.trainable_mut()[idx] = orig + h;
            let up = m.weighted_nll(&batch).unwrap().0;
            m.trainable_mut()[idx] = orig - h;
            let down = m.weighted_nll(&batch).unwrap().0;
            m.trainable_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - ga[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        assert_eq!(m.params(), &base_before[..]);
    }

    #[test]
    fn merge_preserves_outputs() {
        let mut m = model();
        m.attach_adapters(LoraConfig::default(), 5).unwrap();
        for v in m.trainable_mut().iter_mut() {
            *v += 0.01;
        }
        let before = logprob(&m, &[1, 6], &[7, 2]).unwrap();
        m.merge_adapters();
        assert!((logprob(&m, &[1, 6], &[7, 2]).unwrap() - before).abs() < 1e-12);
    }
}
