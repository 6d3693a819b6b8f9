//! The trainable policy: tokenizer, a small decoder-only transformer with
//! exact gradients, optional low-rank adapters, frozen reference snapshots
//! and decoding.

mod adapter;
mod checkpoint;
pub mod fixtures;
mod model;
mod tokenizer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use adapter::{AdapterTarget, LoraConfig};
pub use checkpoint::{checkpoint_hash, CheckpointHeader, CheckpointInfo, Phase, TensorEntry, CHECKPOINT_MAGIC};
pub use model::{Arch, Grads, PolicyModel, ReferencePolicy, TokenBatch, Trace};
pub use tokenizer::{split_turns, Tokenizer, BOS, EOS, PAD, PATIENT, PHYSICIAN, UNK};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("sequence of {len} tokens exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("model has {params} parameters, over the budget of {budget}")]
    OverBudget { params: usize, budget: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid decode settings: {0}")]
    InvalidDecode(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Sampling settings. `temperature == 0` is greedy decoding; `top_k == 0`
/// disables the top-k filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { temperature: 0.0, top_k: 0, max_tokens: 32, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn greedy(max_tokens: usize) -> Self {
        Self { max_tokens, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_tokens == 0 {
            return Err(PolicyError::InvalidDecode("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(PolicyError::InvalidDecode(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }
}

/// Tokens that end a generated turn: end of sequence, or the start of
/// another speaker's turn.
pub fn ends_turn(id: u32) -> bool {
    id == EOS || id == PATIENT || id == PHYSICIAN
}

/// An autoregressive distribution over token ids.
pub trait SequenceModel<S: Scalar>: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;

    fn context_window(&self) -> usize;

    /// `log p(tokens[p] | tokens[..p])` for every `p` in `from..tokens.len()`.
    /// `from` must be at least 1.
    fn token_logprobs(&self, tokens: &[u32], from: usize) -> Result<Vec<S>, PolicyError>;

    /// Next-token log-probabilities after `prefix`.
    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<S>, PolicyError>;

    /// Decodes one turn after `context`; the terminating token is not
    /// included. An empty context is treated as a lone `BOS`.
    fn sample(&self, context: &[u32], decode: &DecodeConfig) -> Result<Vec<u32>, PolicyError> {
        decode.validate()?;
        let mut seq = if context.is_empty() { vec![BOS] } else { context.to_vec() };
        check_window(seq.len() + 1, self.context_window())?;
        let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
        let mut out = Vec::new();
        while out.len() < decode.max_tokens && seq.len() < self.context_window() {
            let row = self.next_logprobs(&seq)?;
            let id = pick_token(&row, decode, &mut rng);
            if ends_turn(id) {
                break;
            }
            out.push(id);
            seq.push(id);
        }
        Ok(out)
    }
}

pub(crate) fn check_window(len: usize, window: usize) -> Result<(), PolicyError> {
    if len > window {
        return Err(PolicyError::ContextOverflow { len, window });
    }
    Ok(())
}

/// `log π(target | context)`, summed over target tokens.
pub fn logprob<S: Scalar, M: SequenceModel<S> + ?Sized>(
    model: &M,
    context: &[u32],
    target: &[u32],
) -> Result<S, PolicyError> {
    if target.is_empty() {
        return Ok(S::zero());
    }
    let mut seq = if context.is_empty() { vec![BOS] } else { context.to_vec() };
    let from = seq.len();
    seq.extend_from_slice(target);
    Ok(model.token_logprobs(&seq, from)?.into_iter().sum())
}

/// Chooses the next token from a row of log-probabilities (or logits).
/// Greedy ties resolve to the lowest id.
pub fn pick_token<S: Scalar, R: Rng>(row: &[S], decode: &DecodeConfig, rng: &mut R) -> u32 {
    if decode.temperature == 0.0 {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if decode.top_k > 0 && decode.top_k < row.len() {
        idx.sort_by(|&a, &b| row[b].f64().total_cmp(&row[a].f64()).then(a.cmp(&b)));
        idx.truncate(decode.top_k);
        idx.sort_unstable();
    }
    let scaled: Vec<f64> = idx.iter().map(|&i| row[i].f64() / decode.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return idx[k] as u32;
        }
        u -= w;
    }
    // Rounding left `u` past the last bucket.
    idx[weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)] as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_picks_lowest_id_on_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = DecodeConfig::greedy(4);
        assert_eq!(pick_token(&[0.1f64, 0.5, 0.5], &d, &mut rng), 1);
    }

    #[test]
    fn top_k_restricts_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = DecodeConfig { temperature: 5.0, top_k: 2, max_tokens: 1, seed: 0 };
        for _ in 0..200 {
            let id = pick_token(&[0.0f64, 3.0, -1.0, 2.9], &d, &mut rng);
            assert!(id == 1 || id == 3);
        }
    }

    #[test]
    fn decode_validation() {
        assert!(DecodeConfig::greedy(0).validate().is_err());
        assert!(DecodeConfig { temperature: -1.0, ..Default::default() }.validate().is_err());
    }
}
