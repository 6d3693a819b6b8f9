//! Closed-form policies for tests and baselines.

use std::collections::HashMap;

use super::{PolicyError, SequenceModel, Tokenizer, EOS};
use crate::corpus::SftExample;
use crate::scalar::Scalar;

/// Every token equally likely at every position.
#[derive(Debug, Clone)]
pub struct UniformPolicy {
    tokenizer: Tokenizer,
    window: usize,
}

impl UniformPolicy {
    pub fn new(tokenizer: Tokenizer, window: usize) -> Self {
        Self { tokenizer, window }
    }
}

impl<S: Scalar> SequenceModel<S> for UniformPolicy {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn token_logprobs(&self, tokens: &[u32], from: usize) -> Result<Vec<S>, PolicyError> {
        super::check_window(tokens.len(), self.window)?;
        let lp = -S::of_usize(self.tokenizer.len()).ln();
        Ok(vec![lp; tokens.len().saturating_sub(from)])
    }

    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<S>, PolicyError> {
        super::check_window(prefix.len(), self.window)?;
        Ok(vec![-S::of_usize(self.tokenizer.len()).ln(); self.tokenizer.len()])
    }
}

/// Next-token distributions listed per prefix; unlisted prefixes fall back
/// to uniform.
#[derive(Debug, Clone)]
pub struct TabularPolicy<S> {
    tokenizer: Tokenizer,
    window: usize,
    rows: HashMap<Vec<u32>, Vec<S>>,
}

impl<S: Scalar> TabularPolicy<S> {
    pub fn new(tokenizer: Tokenizer, window: usize) -> Self {
        Self { tokenizer, window, rows: HashMap::new() }
    }

    /// Sets `p(· | prefix)`; `probs` is normalised here.
    pub fn set(&mut self, prefix: &[u32], probs: &[f64]) {
        assert_eq!(probs.len(), self.tokenizer.len());
        let total: f64 = probs.iter().sum();
        let row = probs.iter().map(|&p| S::of((p / total).ln())).collect();
        self.rows.insert(prefix.to_vec(), row);
    }

    /// Puts all mass on `token` after `prefix`.
    pub fn set_certain(&mut self, prefix: &[u32], token: u32) {
        let mut probs = vec![0.0; self.tokenizer.len()];
        probs[token as usize] = 1.0;
        self.set(prefix, &probs);
    }

    /// A policy that reproduces every example's target exactly.
    pub fn copying(tokenizer: Tokenizer, window: usize, examples: &[SftExample]) -> Self {
        let mut p = Self::new(tokenizer, window);
        for ex in examples {
            let (mut seq, tgt) = p.tokenizer.encode_example(ex);
            for &t in &tgt {
                p.set_certain(&seq, t);
                seq.push(t);
            }
        }
        p
    }

    fn row(&self, prefix: &[u32]) -> Vec<S> {
        self.rows
            .get(prefix)
            .cloned()
            .unwrap_or_else(|| vec![-S::of_usize(self.tokenizer.len()).ln(); self.tokenizer.len()])
    }
}

impl<S: Scalar> SequenceModel<S> for TabularPolicy<S> {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn token_logprobs(&self, tokens: &[u32], from: usize) -> Result<Vec<S>, PolicyError> {
        super::check_window(tokens.len(), self.window)?;
        Ok((from..tokens.len()).map(|p| self.row(&tokens[..p])[tokens[p] as usize]).collect())
    }

    fn next_logprobs(&self, prefix: &[u32]) -> Result<Vec<S>, PolicyError> {
        super::check_window(prefix.len(), self.window)?;
        Ok(self.row(prefix))
    }
}

/// Builds a target-then-EOS continuation for table entries.
pub fn with_eos(ids: &[u32]) -> Vec<u32> {
    let mut v = ids.to_vec();
    v.push(EOS);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{logprob, DecodeConfig, BOS};
    use crate::text::Scheme;

    fn tok16() -> Tokenizer {
        Tokenizer::build(["a b c d e f g h i j"], Scheme::Word)
    }

    #[test]
    fn uniform_logprob() {
        let u = UniformPolicy::new(tok16(), 32);
        assert_eq!(u.tokenizer.len(), 16);
        let lp: f64 = logprob(&u, &[BOS], &[7]).unwrap();
        assert!((lp - (1.0f64 / 16.0).ln()).abs() < 1e-15);
        assert_eq!(logprob::<f64, _>(&u, &[BOS], &[]).unwrap(), 0.0);
    }

    #[test]
    fn copying_policy_reproduces_targets() {
        let ex = SftExample { context: "Patient: a b\nDoctor:".into(), target: "c d e".into(), source: None };
        let t = tok16();
        let p = TabularPolicy::<f64>::copying(t.clone(), 32, std::slice::from_ref(&ex));
        let ctx = t.encode_context(&ex.context);
        let out = p.sample(&ctx, &DecodeConfig::greedy(10)).unwrap();
        assert_eq!(t.decode(&out), "c d e");
        assert_eq!(logprob(&p, &ctx, &t.encode_target(&ex.target)).unwrap(), 0.0);
    }
}
