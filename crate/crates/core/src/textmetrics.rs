//! Single-round evaluation metrics: BLEU, ROUGE-N, ROUGE-L, length rate,
//! perplexity, and the aggregate report.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SftExample;
use crate::policy::{DecodeConfig, PolicyError, SequenceModel};
use crate::scalar::{KahanSum, Scalar};
use crate::text::Scheme;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("max_n must be at least 1")]
    InvalidOrder,
    #[error("token sequences use different schemes ({0} vs {1})")]
    SchemeMismatch(&'static str, &'static str),
    #[error("reference is empty")]
    EmptyReference,
    #[error("no examples to evaluate")]
    NoExamples,
    #[error("example has no target tokens")]
    EmptyTarget,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Surface tokens tagged with the scheme that produced them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub scheme: Scheme,
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn new(text: &str, scheme: Scheme) -> Self {
        Self { scheme, tokens: scheme.split(text).into_iter().map(String::from).collect() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check(&self, other: &TokenSeq) -> Result<(), MetricError> {
        if self.scheme != other.scheme {
            return Err(MetricError::SchemeMismatch(self.scheme.tag(), other.scheme.tag()));
        }
        Ok(())
    }

    pub fn bleu(&self, reference: &TokenSeq, max_n: usize, smoothing: bool) -> Result<Bleu, MetricError> {
        self.check(reference)?;
        bleu(&self.tokens, &reference.tokens, max_n, smoothing)
    }

    pub fn rouge_n(&self, reference: &TokenSeq, n: usize) -> Result<Overlap, MetricError> {
        self.check(reference)?;
        Ok(rouge_n(&self.tokens, &reference.tokens, n))
    }

    pub fn rouge_l(&self, reference: &TokenSeq) -> Result<Overlap, MetricError> {
        self.check(reference)?;
        Ok(rouge_l(&self.tokens, &reference.tokens))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub score: f64,
    /// Set when the candidate or reference is empty.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when either side has no units to count.
    pub degenerate: bool,
}

impl Overlap {
    fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        let precision = if cand_total == 0 { 0.0 } else { hits as f64 / cand_total as f64 };
        let recall = if ref_total == 0 { 0.0 } else { hits as f64 / ref_total as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1, degenerate: cand_total == 0 || ref_total == 0 }
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n == 0 || seq.len() < n {
        return m;
    }
    for w in seq.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram matches and the candidate's n-gram total.
fn clipped_matches<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let hits = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (hits, cand.len().saturating_sub(n - 1))
}

/// Sentence BLEU with uniform weights over orders `1..=max_n`.
///
/// With `smoothing`, an order with no clipped match contributes
/// `1 / (total + 1)` instead of zero.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], max_n: usize, smoothing: bool) -> Result<Bleu, MetricError> {
    if max_n == 0 {
        return Err(MetricError::InvalidOrder);
    }
    if candidate.is_empty() {
        return Ok(Bleu { score: 0.0, degenerate: true });
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (hits, total) = clipped_matches(candidate, reference, n);
        let p = if hits > 0 {
            hits as f64 / total as f64
        } else if smoothing {
            1.0 / (total as f64 + 1.0)
        } else {
            return Ok(Bleu { score: 0.0, degenerate: reference.is_empty() });
        };
        log_sum += p.ln() / max_n as f64;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(Bleu { score: bp * log_sum.exp(), degenerate: reference.is_empty() })
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Overlap {
    if n == 0 {
        return Overlap::from_counts(0, 0, 0);
    }
    let (hits, cand_total) = clipped_matches(candidate, reference, n);
    Overlap::from_counts(hits, cand_total, reference.len().saturating_sub(n - 1))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Overlap {
    Overlap::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

pub fn length_rate(generated: usize, reference: usize) -> Result<f64, MetricError> {
    if reference == 0 {
        return Err(MetricError::EmptyReference);
    }
    Ok(generated as f64 / reference as f64)
}

/// Mean of per-example length ratios.
pub fn mean_length_rate(pairs: &[(usize, usize)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::NoExamples);
    }
    let mut acc = KahanSum::<f64>::new();
    for &(g, r) in pairs {
        acc.add(length_rate(g, r)?);
    }
    Ok(acc.value() / pairs.len() as f64)
}

/// `exp` of the mean target-token negative log-likelihood, where every target
/// token is conditioned on the context and the preceding target tokens.
pub fn perplexity<S: Scalar, M: SequenceModel<S> + ?Sized>(
    model: &M,
    examples: &[SftExample],
) -> Result<S, MetricError> {
    let (nll, tokens) = total_nll(model, examples)?;
    Ok((nll / S::of_usize(tokens)).exp())
}

/// Summed target NLL and target token count.
pub fn total_nll<S: Scalar, M: SequenceModel<S> + ?Sized>(
    model: &M,
    examples: &[SftExample],
) -> Result<(S, usize), MetricError> {
    if examples.is_empty() {
        return Err(MetricError::NoExamples);
    }
    let mut acc = KahanSum::<S>::new();
    let mut count = 0;
    for ex in examples {
        let (ctx, tgt) = model.tokenizer().encode_example(ex);
        if tgt.is_empty() {
            return Err(MetricError::EmptyTarget);
        }
        let mut seq = ctx;
        let from = seq.len();
        seq.extend_from_slice(&tgt);
        for lp in model.token_logprobs(&seq, from)? {
            acc.add(-lp);
        }
        count += tgt.len();
    }
    Ok((acc.value(), count))
}

/// Aggregate single-round scores; ROUGE and BLEU on a 0–100 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: usize,
    pub perplexity: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub length_rate: f64,
}

/// Generated and reference physician turns, used to score without a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub context: String,
    pub reference: String,
    pub generated: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub length_rate: f64,
}

/// Means of ROUGE-1/2/L F1, smoothed BLEU-4 and length rate, scaled ×100
/// where applicable.
pub fn score_generations(gens: &[Generation], scheme: Scheme) -> Result<TextScores, MetricError> {
    if gens.is_empty() {
        return Err(MetricError::NoExamples);
    }
    let mut sums = [KahanSum::<f64>::new(), KahanSum::new(), KahanSum::new(), KahanSum::new()];
    let mut lengths = Vec::with_capacity(gens.len());
    for g in gens {
        let c = scheme.split(&g.generated);
        let r = scheme.split(&g.reference);
        sums[0].add(rouge_n(&c, &r, 1).f1);
        sums[1].add(rouge_n(&c, &r, 2).f1);
        sums[2].add(rouge_l(&c, &r).f1);
        sums[3].add(bleu(&c, &r, 4, true)?.score);
        lengths.push((c.len(), r.len()));
    }
    let k = gens.len() as f64;
    let mean = |i: usize| 100.0 * sums[i].value() / k;
    Ok(TextScores {
        rouge1: mean(0),
        rouge2: mean(1),
        rouge_l: mean(2),
        bleu: mean(3),
        length_rate: mean_length_rate(&lengths)?,
    })
}

/// Decodes one physician turn per example.
pub fn generate_turns<S: Scalar, M: SequenceModel<S> + ?Sized>(
    model: &M,
    examples: &[SftExample],
    decode: &DecodeConfig,
) -> Result<Vec<Generation>, MetricError> {
    let tok = model.tokenizer();
    examples
        .par_iter()
        .map(|ex| {
            let ctx = tok.encode_context(&ex.context);
            let out = model.sample(&ctx, decode)?;
            Ok(Generation {
                context: ex.context.clone(),
                reference: ex.target.clone(),
                generated: tok.decode(&out),
            })
        })
        .collect()
}

pub fn evaluate_single_round<S: Scalar, M: SequenceModel<S> + ?Sized>(
    model: &M,
    examples: &[SftExample],
    decode: &DecodeConfig,
    scheme: Scheme,
) -> Result<(MetricReport, Vec<Generation>), MetricError> {
    let ppl = perplexity(model, examples)?.f64();
    let gens = generate_turns(model, examples, decode)?;
    let s = score_generations(&gens, scheme)?;
    let report = MetricReport {
        examples: examples.len(),
        perplexity: ppl,
        rouge1: s.rouge1,
        rouge2: s.rouge2,
        rouge_l: s.rouge_l,
        bleu: s.bleu,
        length_rate: s.length_rate,
    };
    Ok((report, gens))
}

/// Fixed-width table with one row per named report.
pub struct ReportTable<'a>(pub &'a [(String, MetricReport)]);

impl fmt::Display for ReportTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "model", "perplexity", "rouge-1", "rouge-2", "rouge-l", "bleu", "len-rate"
        )?;
        for (name, r) in self.0 {
            writeln!(
                f,
                "{:<24} {:>10.3} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.3}",
                name, r.perplexity, r.rouge1, r.rouge2, r.rouge_l, r.bleu, r.length_rate
            )?;
        }
        Ok(())
    }
}
