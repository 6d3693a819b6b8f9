//! Supervised fine-tuning and direct preference optimization.
//!
//! Both objectives reduce to a weighted token log-likelihood, so one exact
//! gradient routine in the policy serves both.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SftExample;
use crate::io::derive_seed;
use crate::pairforge::PreferencePair;
use crate::policy::{logprob, Grads, PolicyError, PolicyModel, ReferencePolicy, SequenceModel, TokenBatch, Tokenizer};
use crate::scalar::{log_sigmoid, sigmoid, KahanSum, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training data")]
    EmptyData,
    /// The policy is left at its state before the failing update.
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Policy(PolicyError),
}

impl From<PolicyError> for TrainError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::NonFiniteLoss => TrainError::NonFiniteLoss { step: 0 },
            other => TrainError::Policy(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Sft,
    Dpo,
}

/// How a completion's log-probability enters the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqLogprob {
    /// `log π(y|x)` summed over tokens.
    #[default]
    Sum,
    /// Per-token mean.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: TrainPhase,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub grad_accum: usize,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seq_logprob: SeqLogprob,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default = "adam_b1")]
    pub adam_beta1: f64,
    #[serde(default = "adam_b2")]
    pub adam_beta2: f64,
    #[serde(default = "adam_eps")]
    pub adam_eps: f64,
}

fn one() -> usize {
    1
}
fn adam_b1() -> f64 {
    0.9
}
fn adam_b2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Supervised phase: 10 epochs, with a learning rate scaled up from the
    /// large-model setting for the toy policy.
    pub fn sft() -> Self {
        Self {
            phase: TrainPhase::Sft,
            learning_rate: 5e-3,
            epochs: 10,
            batch_size: 16,
            grad_accum: 1,
            beta: None,
            seed: 0,
            seq_logprob: SeqLogprob::Sum,
            max_grad_norm: Some(1.0),
            adam_beta1: adam_b1(),
            adam_beta2: adam_b2(),
            adam_eps: adam_eps(),
        }
    }

    /// Preference phase: one epoch at 0.4× the supervised rate.
    pub fn dpo() -> Self {
        Self { phase: TrainPhase::Dpo, learning_rate: 2e-3, epochs: 1, beta: Some(0.1), ..Self::sft() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be at least 1".into());
        }
        match (self.phase, self.beta) {
            (TrainPhase::Dpo, None) => return bad("beta is required for the dpo phase".into()),
            (TrainPhase::Dpo, Some(b)) if !(b >= 0.0) => return bad(format!("beta must be non-negative, got {b}")),
            (TrainPhase::Sft, Some(_)) => return bad("beta only applies to the dpo phase".into()),
            _ => {}
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_positive: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_logprob: Option<f64>,
    /// Elapsed seconds; kept out of files so reruns are byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn wall_seconds(&self) -> f64 {
        self.steps.last().map(|s| s.wall_seconds).unwrap_or(0.0)
    }
}

struct Adam<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
    b1: S,
    b2: S,
    eps: S,
    lr: S,
}

impl<S: Scalar> Adam<S> {
    fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            t: 0,
            b1: S::of(cfg.adam_beta1),
            b2: S::of(cfg.adam_beta2),
            eps: S::of(cfg.adam_eps),
            lr: S::of(cfg.learning_rate),
        }
    }

    fn step(&mut self, params: &mut [S], grad: &[S]) {
        self.t += 1;
        let c1 = S::one() - self.b1.powi(self.t);
        let c2 = S::one() - self.b2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.b1 * self.m[i] + (S::one() - self.b1) * g;
            self.v[i] = self.b2 * self.v[i] + (S::one() - self.b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Token ids of a preference pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTokens {
    pub context: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

impl PairTokens {
    pub fn encode(tok: &Tokenizer, pair: &PreferencePair) -> Self {
        Self {
            context: tok.encode_context(&pair.context),
            chosen: tok.encode_target(&pair.chosen),
            rejected: tok.encode_target(&pair.rejected),
        }
    }
}

fn per_token<S: Scalar>(lp: S, len: usize, mode: SeqLogprob) -> S {
    match mode {
        SeqLogprob::Sum => lp,
        SeqLogprob::Mean => lp / S::of_usize(len.max(1)),
    }
}

fn sft_batch<S: Scalar>(tok: &Tokenizer, examples: &[SftExample]) -> TokenBatch<S> {
    let mut batch = TokenBatch::new();
    let b = S::of_usize(examples.len());
    for ex in examples {
        let (ctx, tgt) = tok.encode_example(ex);
        let w = S::one() / (b * S::of_usize(tgt.len()));
        batch.push(&ctx, &tgt, w);
    }
    batch
}

/// Mean over examples of the per-example mean target-token NLL.
pub fn sft_loss<S: Scalar, M: SequenceModel<S> + ?Sized>(model: &M, examples: &[SftExample]) -> Result<S, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let tok = model.tokenizer();
    let mut acc = KahanSum::new();
    for ex in examples {
        let (ctx, tgt) = tok.encode_example(ex);
        acc.add(-logprob(model, &ctx, &tgt)? / S::of_usize(tgt.len()));
    }
    let loss = acc.value() / S::of_usize(examples.len());
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: 0 });
    }
    Ok(loss)
}

pub fn sft_loss_and_grad<S: Scalar>(model: &PolicyModel<S>, examples: &[SftExample]) -> Result<(S, Grads<S>), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData);
    }
    Ok(model.weighted_nll(&sft_batch(model.tokenizer(), examples))?)
}

/// Reward from precomputed log-probabilities: `β · (policy − reference)`.
pub fn reward_from_logprobs<S: Scalar>(policy_lp: S, reference_lp: S, beta: S) -> S {
    beta * (policy_lp - reference_lp)
}

/// `-log σ(margin)`.
pub fn dpo_loss_from_margin<S: Scalar>(margin: S) -> S {
    -log_sigmoid(margin)
}

pub fn dpo_reward<S: Scalar, P, R>(
    policy: &P,
    reference: &R,
    context: &[u32],
    completion: &[u32],
    beta: S,
    mode: SeqLogprob,
) -> Result<S, TrainError>
where
    P: SequenceModel<S> + ?Sized,
    R: SequenceModel<S> + ?Sized,
{
    let lp = per_token(logprob(policy, context, completion)?, completion.len(), mode);
    let rp = per_token(logprob(reference, context, completion)?, completion.len(), mode);
    Ok(reward_from_logprobs(lp, rp, beta))
}

/// Mean DPO loss over pairs.
pub fn dpo_loss<S: Scalar, P, R>(policy: &P, reference: &R, pairs: &[PairTokens], beta: S, mode: SeqLogprob) -> Result<S, TrainError>
where
    P: SequenceModel<S> + ?Sized,
    R: SequenceModel<S> + ?Sized,
{
    if pairs.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut acc = KahanSum::new();
    for p in pairs {
        let rw = dpo_reward(policy, reference, &p.context, &p.chosen, beta, mode)?;
        let rl = dpo_reward(policy, reference, &p.context, &p.rejected, beta, mode)?;
        acc.add(dpo_loss_from_margin(rw - rl));
    }
    let loss = acc.value() / S::of_usize(pairs.len());
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: 0 });
    }
    Ok(loss)
}

/// `(chosen, rejected)` log-probabilities of every pair under `model`.
pub fn pair_logprobs<S: Scalar>(model: &PolicyModel<S>, pairs: &[PairTokens]) -> Result<Vec<(S, S)>, TrainError> {
    let mut batch = TokenBatch::new();
    for p in pairs {
        batch.push(&p.context, &p.chosen, S::zero());
        batch.push(&p.context, &p.rejected, S::zero());
    }
    let lps = model.batch_logprobs(&batch)?;
    Ok(lps.chunks(2).map(|c| (c[0], c[1])).collect())
}

pub fn reference_logprobs<S: Scalar>(reference: &ReferencePolicy<S>, pairs: &[PairTokens]) -> Result<Vec<(S, S)>, TrainError> {
    pair_logprobs(reference.model(), pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub pairs: usize,
    pub loss: f64,
    pub margin_mean: f64,
    /// Fraction of pairs whose reward margin is strictly positive.
    pub positive_fraction: f64,
    pub chosen_logprob_mean: f64,
}

fn margins<S: Scalar>(lps: &[(S, S)], refs: &[(S, S)], pairs: &[PairTokens], beta: S, mode: SeqLogprob) -> Vec<S> {
    lps.iter()
        .zip(refs)
        .zip(pairs)
        .map(|((&(c, r), &(rc, rr)), p)| {
            let rw = reward_from_logprobs(per_token(c, p.chosen.len(), mode), per_token(rc, p.chosen.len(), mode), beta);
            let rl = reward_from_logprobs(per_token(r, p.rejected.len(), mode), per_token(rr, p.rejected.len(), mode), beta);
            rw - rl
        })
        .collect()
}

fn stats_of<S: Scalar>(margins: &[S], lps: &[(S, S)]) -> MarginStats {
    let n = margins.len().max(1) as f64;
    MarginStats {
        pairs: margins.len(),
        loss: margins.iter().map(|&m| dpo_loss_from_margin(m).f64()).sum::<f64>() / n,
        margin_mean: margins.iter().map(|m| m.f64()).sum::<f64>() / n,
        positive_fraction: margins.iter().filter(|m| m.f64() > 0.0).count() as f64 / n,
        chosen_logprob_mean: lps.iter().map(|l| l.0.f64()).sum::<f64>() / n,
    }
}

/// Reward-margin statistics of `policy` against `reference` on `pairs`.
pub fn margin_stats<S: Scalar>(
    policy: &PolicyModel<S>,
    reference: &ReferencePolicy<S>,
    pairs: &[PairTokens],
    beta: f64,
    mode: SeqLogprob,
) -> Result<MarginStats, TrainError> {
    let lps = pair_logprobs(policy, pairs)?;
    let refs = reference_logprobs(reference, pairs)?;
    Ok(stats_of(&margins(&lps, &refs, pairs, S::of(beta), mode), &lps))
}

/// Mean DPO loss and its gradient, with reference log-probabilities given.
pub fn dpo_loss_and_grad<S: Scalar>(
    policy: &PolicyModel<S>,
    pairs: &[PairTokens],
    refs: &[(S, S)],
    beta: S,
    mode: SeqLogprob,
) -> Result<(S, Grads<S>, MarginStats), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut batch = TokenBatch::new();
    for p in pairs {
        batch.push(&p.context, &p.chosen, S::zero());
        batch.push(&p.context, &p.rejected, S::zero());
    }
    let mut stats = None;
    let n = S::of_usize(pairs.len());
    let (loss, grads) = policy.weighted_nll_with(&mut batch, |lps, _| {
        let lps: Vec<(S, S)> = lps.chunks(2).map(|c| (c[0], c[1])).collect();
        let ms = margins(&lps, refs, pairs, beta, mode);
        stats = Some(stats_of(&ms, &lps));
        let mut loss = KahanSum::new();
        let mut weights = Vec::with_capacity(2 * pairs.len());
        for (m, p) in ms.iter().zip(pairs) {
            loss.add(dpo_loss_from_margin(*m));
            let k = beta * sigmoid(-*m) / n;
            let (kc, kr) = match mode {
                SeqLogprob::Sum => (k, k),
                SeqLogprob::Mean => (k / S::of_usize(p.chosen.len()), k / S::of_usize(p.rejected.len())),
            };
            weights.push(vec![kc; p.chosen.len()]);
            weights.push(vec![-kr; p.rejected.len()]);
        }
        (loss.value() / n, weights)
    })?;
    Ok((loss, grads, stats.expect("weights computed")))
}

/// Training data for one phase.
pub enum TrainData<'a, S> {
    Sft(&'a [SftExample]),
    Dpo { reference: &'a ReferencePolicy<S>, pairs: &'a [PreferencePair] },
}

/// Indices grouped by key, groups shuffled, then flattened: batches keep
/// items of one dialogue together so shared prefixes are packed.
fn grouped_order(keys: &[&str], seed: u64, epoch: usize) -> Vec<usize> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["epoch", &epoch.to_string()]));
    groups.shuffle(&mut rng);
    groups.into_iter().flatten().collect()
}

/// Runs the configured phase, updating `policy` in place. On a non-finite
/// loss the policy keeps its last finite parameters.
pub fn train<S: Scalar>(policy: &mut PolicyModel<S>, data: TrainData<'_, S>, config: &TrainConfig) -> Result<TrainLog, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let tok = policy.tokenizer().clone();
    let mut adam = Adam::new(policy.trainable().len(), config);
    let mut log = TrainLog::default();
    let clip = config.max_grad_norm.map(S::of);

    enum Prepared<'a> {
        Sft(&'a [SftExample]),
        Dpo { pairs: Vec<PairTokens>, refs: Vec<(f64, f64)>, beta: f64 },
    }
    let (prepared, keys): (Prepared, Vec<String>) = match (config.phase, data) {
        (TrainPhase::Sft, TrainData::Sft(ex)) => {
            if ex.is_empty() {
                return Err(TrainError::EmptyData);
            }
            let keys = ex
                .iter()
                .enumerate()
                .map(|(i, e)| e.source.as_ref().map(|s| s.dialogue_id.clone()).unwrap_or_else(|| format!("#{i}")))
                .collect();
            (Prepared::Sft(ex), keys)
        }
        (TrainPhase::Dpo, TrainData::Dpo { reference, pairs }) => {
            if pairs.is_empty() {
                return Err(TrainError::EmptyData);
            }
            let enc: Vec<PairTokens> = pairs.iter().map(|p| PairTokens::encode(&tok, p)).collect();
            let refs = reference_logprobs(reference, &enc)?.into_iter().map(|(a, b)| (a.f64(), b.f64())).collect();
            let keys = pairs.iter().map(|p| p.dialogue_id.clone()).collect();
            (Prepared::Dpo { pairs: enc, refs, beta: config.beta.expect("validated") }, keys)
        }
        _ => return Err(TrainError::Config("data does not match the configured phase".into())),
    };
    let key_refs: Vec<&str> = keys.iter().map(String::as_str).collect();

    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = grouped_order(&key_refs, config.seed, epoch);
        let micro: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for chunk in micro.chunks(config.grad_accum) {
            let mut total: Option<Grads<S>> = None;
            let mut loss = 0.0;
            let mut margin: Option<(f64, f64, f64)> = None;
            for idx in chunk {
                let (l, g, st) = match &prepared {
                    Prepared::Sft(ex) => {
                        let batch: Vec<SftExample> = idx.iter().map(|&i| ex[i].clone()).collect();
                        let (l, g) = sft_loss_and_grad(policy, &batch).map_err(|e| at_step(e, step))?;
                        (l, g, None)
                    }
                    Prepared::Dpo { pairs, refs, beta } => {
                        let bp: Vec<PairTokens> = idx.iter().map(|&i| pairs[i].clone()).collect();
                        let br: Vec<(S, S)> = idx.iter().map(|&i| (S::of(refs[i].0), S::of(refs[i].1))).collect();
                        let (l, g, st) = dpo_loss_and_grad(policy, &bp, &br, S::of(*beta), config.seq_logprob)
                            .map_err(|e| at_step(e, step))?;
                        (l, g, Some(st))
                    }
                };
                if !l.is_finite() || g.trainable().iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                loss += l.f64() / chunk.len() as f64;
                if let Some(st) = st {
                    let w = 1.0 / chunk.len() as f64;
                    let m = margin.get_or_insert((0.0, 0.0, 0.0));
                    m.0 += w * st.margin_mean;
                    m.1 += w * st.positive_fraction;
                    m.2 += w * st.chosen_logprob_mean;
                }
                match &mut total {
                    Some(t) => t.add_assign(&g),
                    None => total = Some(g),
                }
            }
            let mut g = total.expect("chunk is non-empty");
            if chunk.len() > 1 {
                g.scale(S::one() / S::of_usize(chunk.len()));
            }
            let norm = g.norm();
            if let Some(c) = clip {
                if norm > c {
                    g.scale(c / norm);
                }
            }
            adam.step(policy.trainable_mut(), g.trainable());
            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                grad_norm: norm.f64(),
                margin_mean: margin.map(|m| m.0),
                margin_positive: margin.map(|m| m.1),
                chosen_logprob: margin.map(|m| m.2),
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            step += 1;
        }
    }
    Ok(log)
}

fn at_step(e: TrainError, step: usize) -> TrainError {
    match e {
        TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { step },
        other => other,
    }
}
