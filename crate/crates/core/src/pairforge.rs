//! Preference-pair construction: chosen completions are the rule-synthesized
//! physician turns; rejected ones come from low-similarity policy samples or
//! from disrupting the dialogue order.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_context, Dialogue, Role, SftExample};
use crate::io::derive_seed;
use crate::policy::{DecodeConfig, PolicyError, SequenceModel};
use crate::scalar::Scalar;
use crate::text::Scheme;
use crate::textmetrics::bleu;

#[derive(Debug, Error)]
pub enum PairError {
    #[error("turn {turn_index} of {dialogue_id} has no {mode} source")]
    NoDisruptionSource { dialogue_id: String, turn_index: usize, mode: &'static str },
    #[error("turn {turn_index} of {dialogue_id} is not a physician turn")]
    NotPhysicianTurn { dialogue_id: String, turn_index: usize },
    #[error("subsample fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("invalid forge config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SampledFiltered,
    RepeatDisruption,
    SkipDisruption,
    /// First policy sample, unfiltered.
    RawSample,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SampledFiltered => "sampled_filtered",
            Strategy::RepeatDisruption => "repeat_disruption",
            Strategy::SkipDisruption => "skip_disruption",
            Strategy::RawSample => "raw_sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: String,
    pub chosen: String,
    pub rejected: String,
    pub strategy: Strategy,
    pub bleu_to_chosen: f64,
    pub dialogue_id: String,
    pub turn_index: usize,
}

impl PreferencePair {
    pub fn new(
        context: &str,
        chosen: &str,
        rejected: &str,
        strategy: Strategy,
        bleu_to_chosen: f64,
        dialogue_id: &str,
        turn_index: usize,
    ) -> Self {
        Self {
            context: context.into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            strategy,
            bleu_to_chosen,
            dialogue_id: dialogue_id.into(),
            turn_index,
        }
    }
}

/// Disruption modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disruption {
    /// The previous physician turn.
    Repeat,
    /// The next physician turn.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyMix {
    pub sampled: f64,
    pub repeat: f64,
    pub skip: f64,
}

impl Default for StrategyMix {
    fn default() -> Self {
        Self { sampled: 0.5, repeat: 0.25, skip: 0.25 }
    }
}

impl StrategyMix {
    pub fn only(s: Strategy) -> Self {
        let mut m = Self { sampled: 0.0, repeat: 0.0, skip: 0.0 };
        match s {
            Strategy::SampledFiltered | Strategy::RawSample => m.sampled = 1.0,
            Strategy::RepeatDisruption => m.repeat = 1.0,
            Strategy::SkipDisruption => m.skip = 1.0,
        }
        m
    }

    pub fn disruption_only() -> Self {
        Self { sampled: 0.0, repeat: 0.5, skip: 0.5 }
    }

    fn validate(&self) -> Result<(), PairError> {
        let parts = [self.sampled, self.repeat, self.skip];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PairError::Config(format!("strategy mix must be non-negative and sum to 1, got {parts:?}")));
        }
        Ok(())
    }

    fn draw(&self, u: f64) -> Strategy {
        if u < self.sampled {
            Strategy::SampledFiltered
        } else if u < self.sampled + self.repeat || self.skip == 0.0 {
            Strategy::RepeatDisruption
        } else {
            Strategy::SkipDisruption
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeConfig {
    pub samples_per_context: usize,
    pub bleu_threshold: f64,
    #[serde(default)]
    pub mix: StrategyMix,
    pub decode: DecodeConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fallback: Fallback,
    /// Use the first sample unfiltered instead of similarity filtering.
    #[serde(default)]
    pub raw_samples: bool,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
}

/// What to try when the drawn strategy yields nothing. Fallbacks run in
/// the fixed order sampled, repeat, skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Every other strategy.
    #[default]
    All,
    /// Only strategies with positive weight in the mix.
    WithinMix,
    Off,
}

fn default_scheme() -> Scheme {
    Scheme::Word
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            samples_per_context: 8,
            bleu_threshold: 0.6,
            mix: StrategyMix::default(),
            decode: DecodeConfig { temperature: 1.0, top_k: 0, max_tokens: 48, seed: 0 },
            seed: 0,
            fallback: Fallback::All,
            raw_samples: false,
            scheme: Scheme::Word,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<(), PairError> {
        self.mix.validate()?;
        if self.samples_per_context == 0 {
            return Err(PairError::Config("samples_per_context must be at least 1".into()));
        }
        if !(self.bleu_threshold > 0.0 && self.bleu_threshold < 1.0) {
            return Err(PairError::Config(format!("bleu_threshold must lie in (0, 1), got {}", self.bleu_threshold)));
        }
        self.decode.validate()?;
        Ok(())
    }
}

/// Smoothed sentence BLEU-4 of `candidate` against `reference`, in [0, 1].
pub fn similarity(candidate: &str, reference: &str, scheme: Scheme) -> f64 {
    let c = scheme.split(candidate);
    let r = scheme.split(reference);
    bleu(&c, &r, 4, true).map(|b| b.score).unwrap_or(0.0)
}

fn context_key(ex: &SftExample) -> (String, usize) {
    ex.source.as_ref().map(|s| (s.dialogue_id.clone(), s.turn_index)).unwrap_or_else(|| (ex.context.clone(), 0))
}

/// Policy samples for each context, so several arms can share them.
#[derive(Debug, Default, Clone)]
pub struct SampleCache {
    samples: HashMap<(String, usize), Vec<String>>,
}

impl SampleCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn fill<S: Scalar, M: SequenceModel<S> + ?Sized>(
        &mut self,
        policy: &M,
        examples: &[&SftExample],
        config: &ForgeConfig,
    ) -> Result<(), PairError> {
        let missing: Vec<&SftExample> =
            examples.iter().copied().filter(|e| !self.samples.contains_key(&context_key(e))).collect();
        let drawn = missing
            .par_iter()
            .map(|e| draw_samples(policy, e, config))
            .collect::<Result<Vec<_>, _>>()?;
        for (e, s) in missing.into_iter().zip(drawn) {
            self.samples.insert(context_key(e), s);
        }
        Ok(())
    }
}

/// `n` completions for one context, seeded per (seed, dialogue, turn, k).
pub fn draw_samples<S: Scalar, M: SequenceModel<S> + ?Sized>(
    policy: &M,
    example: &SftExample,
    config: &ForgeConfig,
) -> Result<Vec<String>, PairError> {
    let tok = policy.tokenizer();
    let ctx = tok.encode_context(&example.context);
    let (id, turn) = context_key(example);
    (0..config.samples_per_context)
        .map(|k| {
            let seed = derive_seed(config.seed, &["sample", &id, &turn.to_string(), &k.to_string()]);
            let ids = policy.sample(&ctx, &DecodeConfig { seed, ..config.decode })?;
            Ok(tok.decode(&ids))
        })
        .collect()
}

/// Picks the sample least similar to the chosen turn; ties go to the
/// earliest sample. `None` unless that similarity is under the threshold.
pub fn select_rejection(samples: &[String], chosen: &str, threshold: f64, scheme: Scheme) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in samples.iter().enumerate() {
        if s == chosen {
            continue;
        }
        let b = similarity(s, chosen, scheme);
        if best.is_none_or(|(_, v)| b < v) {
            best = Some((i, b));
        }
    }
    best.filter(|(_, b)| *b < threshold)
}

pub fn forge_sampled<S: Scalar, M: SequenceModel<S> + ?Sized>(
    policy: &M,
    example: &SftExample,
    config: &ForgeConfig,
) -> Result<Option<PreferencePair>, PairError> {
    let samples = draw_samples(policy, example, config)?;
    Ok(sampled_pair(example, &samples, config))
}

fn sampled_pair(example: &SftExample, samples: &[String], config: &ForgeConfig) -> Option<PreferencePair> {
    let (id, turn) = context_key(example);
    let (i, b) = select_rejection(samples, &example.target, config.bleu_threshold, config.scheme)?;
    Some(PreferencePair::new(&example.context, &example.target, &samples[i], Strategy::SampledFiltered, b, &id, turn))
}

fn raw_pair(example: &SftExample, samples: &[String], scheme: Scheme) -> Option<PreferencePair> {
    let (id, turn) = context_key(example);
    let s = samples.iter().find(|s| **s != example.target)?;
    let b = similarity(s, &example.target, scheme);
    Some(PreferencePair::new(&example.context, &example.target, s, Strategy::RawSample, b, &id, turn))
}

/// Pair whose rejection is a neighbouring physician turn of the same
/// dialogue.
pub fn forge_disruption(dialogue: &Dialogue, turn_index: usize, mode: Disruption) -> Result<PreferencePair, PairError> {
    let turn = dialogue.turns.get(turn_index).filter(|t| t.role == Role::Physician && turn_index > 0);
    let turn = turn.ok_or_else(|| PairError::NotPhysicianTurn { dialogue_id: dialogue.id.clone(), turn_index })?;
    let phys = dialogue.physician_turn_indices();
    let pos = phys.iter().position(|&i| i == turn_index).expect("physician turn is listed");
    let (source, strategy, name) = match mode {
        Disruption::Repeat => (pos.checked_sub(1).map(|p| phys[p]), Strategy::RepeatDisruption, "repeat"),
        Disruption::Skip => (phys.get(pos + 1).copied(), Strategy::SkipDisruption, "skip"),
    };
    let source = source.ok_or_else(|| PairError::NoDisruptionSource {
        dialogue_id: dialogue.id.clone(),
        turn_index,
        mode: name,
    })?;
    let rejected = &dialogue.turns[source].text;
    Ok(PreferencePair::new(
        &render_context(&dialogue.turns[..turn_index]),
        &turn.text,
        rejected,
        strategy,
        similarity(rejected, &turn.text, Scheme::Word),
        &dialogue.id,
        turn_index,
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgeReport {
    pub contexts: usize,
    pub pairs: usize,
    pub by_strategy: BTreeMap<String, usize>,
    /// Contexts whose pair came from a fallback strategy.
    pub fallbacks: usize,
    /// Contexts that produced no pair.
    pub dropped: usize,
    /// Failed attempts by reason, over all strategies tried.
    pub drop_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ForgeOutput {
    pub pairs: Vec<PreferencePair>,
    pub report: ForgeReport,
}

struct Attempt {
    pair: Option<PreferencePair>,
    fallback: bool,
    failures: Vec<&'static str>,
}

fn forge_context(d: &Dialogue, ex: &SftExample, turn: usize, samples: Option<&[String]>, cfg: &ForgeConfig) -> Attempt {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["strategy", &d.id, &turn.to_string()]));
    let drawn = cfg.mix.draw(rng.random::<f64>());
    let mut order = vec![drawn];
    let weights = [cfg.mix.sampled, cfg.mix.repeat, cfg.mix.skip];
    for (s, w) in [Strategy::SampledFiltered, Strategy::RepeatDisruption, Strategy::SkipDisruption].into_iter().zip(weights) {
        let allowed = match cfg.fallback {
            Fallback::All => true,
            Fallback::WithinMix => w > 0.0,
            Fallback::Off => false,
        };
        if s != drawn && allowed {
            order.push(s);
        }
    }
    let mut failures = Vec::new();
    for (k, s) in order.into_iter().enumerate() {
        let (pair, reason) = match s {
            Strategy::SampledFiltered | Strategy::RawSample => {
                let samples = samples.expect("samples drawn for sampled strategies");
                if cfg.raw_samples {
                    (raw_pair(ex, samples, cfg.scheme), "no_distinct_sample")
                } else {
                    (sampled_pair(ex, samples, cfg), "no_sample_below_threshold")
                }
            }
            Strategy::RepeatDisruption => {
                (forge_disruption(d, turn, Disruption::Repeat).ok(), "no_previous_physician_turn")
            }
            Strategy::SkipDisruption => (forge_disruption(d, turn, Disruption::Skip).ok(), "no_next_physician_turn"),
        };
        match pair {
            Some(p) if p.chosen != p.rejected => return Attempt { pair: Some(p), fallback: k > 0, failures },
            Some(_) => failures.push("identical_completion"),
            None => failures.push(reason),
        }
    }
    Attempt { pair: None, fallback: false, failures }
}

/// One pair per physician-turn context at most, sorted by dialogue id and
/// turn index.
pub fn forge_dataset<S: Scalar, M: SequenceModel<S> + ?Sized>(
    dialogues: &[Dialogue],
    policy: &M,
    config: &ForgeConfig,
) -> Result<ForgeOutput, PairError> {
    forge_dataset_cached(dialogues, policy, config, &mut SampleCache::new())
}

pub fn forge_dataset_cached<S: Scalar, M: SequenceModel<S> + ?Sized>(
    dialogues: &[Dialogue],
    policy: &M,
    config: &ForgeConfig,
    cache: &mut SampleCache,
) -> Result<ForgeOutput, PairError> {
    config.validate()?;
    let mut sorted: Vec<&Dialogue> = dialogues.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut contexts = Vec::new();
    for d in sorted {
        for ex in crate::corpus::explode_dialogue(d) {
            let turn = ex.source.as_ref().expect("exploded examples carry a source").turn_index;
            contexts.push((d, ex, turn));
        }
    }
    let needs_samples = config.mix.sampled > 0.0 || config.fallback == Fallback::All;
    if needs_samples {
        let exs: Vec<&SftExample> = contexts.iter().map(|(_, e, _)| e).collect();
        cache.fill(policy, &exs, config)?;
    }
    let attempts: Vec<Attempt> = contexts
        .par_iter()
        .map(|(d, ex, turn)| {
            let samples = needs_samples.then(|| cache.samples[&context_key(ex)].as_slice());
            forge_context(d, ex, *turn, samples, config)
        })
        .collect();
    let mut out = ForgeOutput::default();
    out.report.contexts = contexts.len();
    for a in attempts {
        for f in a.failures {
            *out.report.drop_reasons.entry(f.to_string()).or_default() += 1;
        }
        match a.pair {
            Some(p) => {
                *out.report.by_strategy.entry(p.strategy.name().to_string()).or_default() += 1;
                out.report.fallbacks += a.fallback as usize;
                out.pairs.push(p);
            }
            None => out.report.dropped += 1,
        }
    }
    out.report.pairs = out.pairs.len();
    Ok(out)
}

/// Seeded subsample keeping `round(fraction · n)` pairs of each strategy,
/// in their original order.
pub fn subsample_pairs(pairs: &[PreferencePair], fraction: f64, seed: u64) -> Result<Vec<PreferencePair>, PairError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PairError::InvalidFraction(fraction));
    }
    let mut strata: BTreeMap<Strategy, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        strata.entry(p.strategy).or_default().push(i);
    }
    let mut keep = Vec::new();
    for (s, mut idx) in strata {
        let n = (fraction * idx.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["subsample", s.name()]));
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..n.min(idx.len())]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| pairs[i].clone()).collect())
}
