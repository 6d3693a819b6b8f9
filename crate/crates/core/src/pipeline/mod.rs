//! End-to-end orchestration: generation, splitting, supervised and
//! preference training, evaluation and the ablation driver.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{self, margin_stats, MarginStats, PairTokens, TrainData, TrainError, TrainLog};
use crate::corpus::{explode_corpus, validate_dialogue, CorpusError, Dialogue, SftExample};
use crate::genpipeline::{
    generate_corpus, ruleify_corpus, BackendError, BatchOutput, ChatBackend, GenError, HttpChatBackend, QaRecord,
    QuarantineEntry, RuleWorld, StageTagger, SyntheticBackend, Templates,
};
use crate::io::{read_json, read_jsonl, IoError};
use crate::pairforge::{
    forge_dataset_cached, subsample_pairs, Fallback, ForgeConfig, ForgeOutput, PairError, PreferencePair, SampleCache,
    Strategy, StrategyMix,
};
use crate::policy::{PolicyError, PolicyModel, ReferencePolicy, SequenceModel, Tokenizer};
use crate::rulemodel::{read_rules, DiseaseNameMap, RuleError, RuleSet};
use crate::spsim::{world_cases, SpError, HONEST_ABSENCE};
use crate::textmetrics::{evaluate_single_round, Generation, MetricError, MetricReport};

pub use commands::*;
pub use config::*;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Numeric(_) => 3,
        }
    }
}

impl From<PolicyError> for PipelineError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::NonFiniteLoss => PipelineError::Numeric(e.to_string()),
            PolicyError::OverBudget { .. } | PolicyError::InvalidArch(_) | PolicyError::InvalidDecode(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => PipelineError::Numeric(e.to_string()),
            TrainError::Config(_) => PipelineError::Config(e.to_string()),
            TrainError::EmptyData => PipelineError::Data(e.to_string()),
            TrainError::Policy(p) => p.into(),
        }
    }
}

impl From<PairError> for PipelineError {
    fn from(e: PairError) -> Self {
        match e {
            PairError::Policy(p) => p.into(),
            PairError::Config(_) | PairError::InvalidFraction(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for PipelineError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Policy(p) => p.into(),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<SpError> for PipelineError {
    fn from(e: SpError) -> Self {
        match e {
            SpError::Policy(p) => p.into(),
            SpError::TooFewTurns { .. } => PipelineError::Config(e.to_string()),
            SpError::MissingRule(_) => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::MissingCredential(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}
data_errors!(IoError, RuleError, GenError, CorpusError);

/// Rules, names, templates and the world that backs the synthetic backend
/// and the simulated patients.
pub struct Sources {
    pub world: RuleWorld,
    pub rules: RuleSet,
    pub names: DiseaseNameMap,
    pub templates: Arc<Templates>,
}

impl Sources {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, PipelineError> {
        cfg.check_inputs()?;
        let world = match &cfg.paths.world {
            Some(p) => read_json::<RuleWorld>(p)?,
            None => match cfg.world.kind {
                WorldKind::Urology => RuleWorld::urology(),
                WorldKind::Generated => RuleWorld::generated(cfg.world.diseases, cfg.stage_seed("world")),
            },
        };
        let rule_list = match &cfg.paths.rules {
            Some(p) => read_rules(p)?,
            None => world.rules(),
        };
        let rules = RuleSet::new(rule_list)?;
        let names = match &cfg.paths.aliases {
            Some(p) => DiseaseNameMap::read(p, rules.rules())?,
            None => world.name_map()?,
        };
        let templates = match &cfg.paths.templates {
            Some(dir) => Templates::load(dir)?,
            None => Templates::default(),
        };
        Ok(Self { world, rules, names, templates: Arc::new(templates) })
    }

    pub fn backend(&self, cfg: &ExperimentConfig) -> Result<Box<dyn ChatBackend>, PipelineError> {
        Ok(match cfg.backend.kind {
            BackendKind::Synthetic => {
                Box::new(SyntheticBackend::new(self.world.clone()).with_failure_rate(cfg.backend.failure_rate))
            }
            BackendKind::Http => {
                let http = cfg.backend.http.clone().expect("validated: http backend has settings");
                Box::new(HttpChatBackend::from_env(http)?)
            }
        })
    }

    pub fn qa_records(&self, cfg: &ExperimentConfig) -> Result<Vec<QaRecord>, PipelineError> {
        match &cfg.paths.qa {
            Some(p) => Ok(read_jsonl(p)?.1),
            None => Ok(self.world.qa_records(cfg.generation.qa_records, cfg.stage_seed("qa"))),
        }
    }
}

/// Converts single-turn records into raw multi-turn dialogues.
pub fn generate_stage(
    cfg: &ExperimentConfig,
    src: &Sources,
    records: &[QaRecord],
    backend: &dyn ChatBackend,
) -> BatchOutput {
    generate_corpus(
        records,
        &src.rules,
        &src.names,
        src.templates.clone(),
        &cfg.generation.sampling,
        false,
        backend,
        cfg.generation.parallelism,
    )
}

/// Rewrites dialogues under their rules; results outside the configured
/// bounds are quarantined.
pub fn ruleify_stage(
    cfg: &ExperimentConfig,
    src: &Sources,
    dialogues: &[Dialogue],
    backend: &dyn ChatBackend,
) -> BatchOutput {
    let sampling = crate::genpipeline::Sampling { seed: cfg.stage_seed("ruleify"), ..cfg.generation.sampling };
    let out = ruleify_corpus(dialogues, &src.rules, &src.templates, &sampling, backend, cfg.generation.parallelism);
    let mut kept = BatchOutput { quarantine: out.quarantine, ..Default::default() };
    for d in out.dialogues {
        let v = validate_dialogue(&d, &cfg.corpus.bounds, cfg.scheme);
        if v.is_empty() {
            kept.dialogues.push(d);
        } else {
            let error = serde_json::to_string(&v).expect("violations serialize");
            kept.quarantine.push(QuarantineEntry { source_id: d.id.clone(), stage: "bounds".into(), error });
        }
    }
    kept
}

/// Vocabulary over every dialogue turn and every text a simulated patient
/// can say.
pub fn build_tokenizer(dialogues: &[Dialogue], world: &RuleWorld, cfg: &ExperimentConfig) -> Tokenizer {
    let mut texts: Vec<String> = dialogues.iter().flat_map(|d| d.turns.iter().map(|t| t.text.clone())).collect();
    let cases = world_cases(world, world.diseases.len(), 0, 2);
    for c in &cases {
        texts.extend(c.repository().into_iter().map(str::to_string));
    }
    texts.extend(world.history_facts.values().flatten().cloned());
    texts.push(HONEST_ABSENCE.to_string());
    Tokenizer::build(texts.iter().map(String::as_str), cfg.scheme)
}

pub fn new_policy(cfg: &ExperimentConfig, tokenizer: Tokenizer) -> Result<PolicyModel<f64>, PipelineError> {
    let arch = cfg.model.arch(tokenizer.len());
    Ok(PolicyModel::new(arch, tokenizer, cfg.stage_seed("init"))?)
}

pub fn train_sft(cfg: &ExperimentConfig, policy: &mut PolicyModel<f64>, train: &[Dialogue]) -> Result<TrainLog, PipelineError> {
    let examples = explode_corpus(train);
    Ok(align::train(policy, TrainData::Sft(&examples), &cfg.sft)?)
}

/// Copies `sft`, attaches adapters when configured and runs preference
/// training against the frozen `sft`.
pub fn train_dpo(
    cfg: &ExperimentConfig,
    sft: &PolicyModel<f64>,
    pairs: &[PreferencePair],
) -> Result<(PolicyModel<f64>, ReferencePolicy<f64>, TrainLog), PipelineError> {
    let reference = sft.snapshot_reference();
    let mut policy = sft.clone();
    if let Some(lora) = &cfg.model.lora {
        policy.attach_adapters(lora.clone(), cfg.stage_seed("lora"))?;
    }
    let log = align::train(&mut policy, TrainData::Dpo { reference: &reference, pairs }, &cfg.dpo)?;
    Ok((policy, reference, log))
}

pub fn forge(
    cfg: &ForgeConfig,
    dialogues: &[Dialogue],
    policy: &PolicyModel<f64>,
    cache: &mut SampleCache,
) -> Result<ForgeOutput, PipelineError> {
    Ok(forge_dataset_cached(dialogues, policy, cfg, cache)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    pub contexts: usize,
    pub compliant: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGeneration {
    pub dialogue_id: String,
    pub turn_index: usize,
    #[serde(flatten)]
    pub generation: Generation,
    pub complies: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub compliance: Compliance,
    /// Margins on pairs forged from the test split, when a reference exists.
    #[serde(default)]
    pub heldout: Option<MarginStats>,
}

/// Single-round metrics plus trajectory compliance of each generated turn.
pub fn evaluate(
    cfg: &ExperimentConfig,
    policy: &PolicyModel<f64>,
    test: &[Dialogue],
    rules: &RuleSet,
) -> Result<(EvalReport, Vec<ScoredGeneration>), PipelineError> {
    let examples: Vec<SftExample> = explode_corpus(test);
    let (metrics, gens) = evaluate_single_round(policy, &examples, &cfg.eval.decode, cfg.scheme)?;
    let by_id: BTreeMap<&str, &Dialogue> = test.iter().map(|d| (d.id.as_str(), d)).collect();
    let tagger = StageTagger::default();
    let mut scored = Vec::with_capacity(gens.len());
    for (ex, g) in examples.iter().zip(gens) {
        let src = ex.source.as_ref().expect("exploded examples carry their source");
        let d = by_id[src.dialogue_id.as_str()];
        let rule = rules
            .get(&d.disease.canonical_name)
            .ok_or_else(|| PipelineError::Data(format!("no rule for {} in {}", d.disease, d.id)))?;
        let complies = tagger.turn_complies(&d.turns[..src.turn_index], &g.generated, rule);
        scored.push(ScoredGeneration { dialogue_id: d.id.clone(), turn_index: src.turn_index, generation: g, complies });
    }
    let compliant = scored.iter().filter(|s| s.complies).count();
    let compliance = Compliance { contexts: scored.len(), compliant, rate: compliant as f64 / scored.len().max(1) as f64 };
    Ok((EvalReport { metrics, compliance, heldout: None }, scored))
}

pub fn heldout_margins(
    cfg: &ExperimentConfig,
    policy: &PolicyModel<f64>,
    reference: &ReferencePolicy<f64>,
    pairs: &[PreferencePair],
) -> Result<MarginStats, PipelineError> {
    let tok = policy.tokenizer();
    let encoded: Vec<PairTokens> = pairs.iter().map(|p| PairTokens::encode(tok, p)).collect();
    let beta = cfg.dpo.beta.expect("validated: dpo config has beta");
    Ok(margin_stats(policy, reference, &encoded, beta, cfg.dpo.seq_logprob)?)
}

/// Forges the held-out pairs: default strategy mix over the test split,
/// rejections sampled from the reference.
pub fn heldout_pairs(
    cfg: &ExperimentConfig,
    test: &[Dialogue],
    reference: &PolicyModel<f64>,
) -> Result<Vec<PreferencePair>, PipelineError> {
    let fc = ForgeConfig {
        seed: cfg.stage_seed("heldout"),
        mix: StrategyMix::default(),
        fallback: Fallback::All,
        raw_samples: false,
        ..cfg.forge.clone()
    };
    Ok(forge(&fc, test, reference, &mut SampleCache::new())?.pairs)
}

/// Ablation arms. Every preference arm starts from the same supervised
/// checkpoint and shares its policy samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    SftOnly,
    /// First sample as the rejection, no filtering or disruption.
    DpoRaw,
    DpoSimilarityOnly,
    DpoDisruptionOnly,
    Rulealign,
    /// Rulealign trained on a stratified subsample of its pairs.
    RulealignSubsample,
}

impl Arm {
    pub const ALL: [Arm; 6] =
        [Arm::SftOnly, Arm::DpoRaw, Arm::DpoSimilarityOnly, Arm::DpoDisruptionOnly, Arm::Rulealign, Arm::RulealignSubsample];

    pub fn label(&self, subsample: f64) -> String {
        match self {
            Arm::SftOnly => "sft-only".into(),
            Arm::DpoRaw => "dpo-raw".into(),
            Arm::DpoSimilarityOnly => "dpo-similarity-only".into(),
            Arm::DpoDisruptionOnly => "dpo-disruption-only".into(),
            Arm::Rulealign => "rulealign".into(),
            Arm::RulealignSubsample => format!("rulealign-{}%", (subsample * 100.0).round()),
        }
    }

    /// Forge settings, or `None` for the supervised-only arm.
    pub fn forge_config(&self, base: &ForgeConfig) -> Option<ForgeConfig> {
        let c = base.clone();
        match self {
            Arm::SftOnly => None,
            Arm::DpoRaw => Some(ForgeConfig {
                mix: StrategyMix::only(Strategy::SampledFiltered),
                raw_samples: true,
                fallback: Fallback::Off,
                ..c
            }),
            Arm::DpoSimilarityOnly => {
                Some(ForgeConfig { mix: StrategyMix::only(Strategy::SampledFiltered), fallback: Fallback::WithinMix, ..c })
            }
            Arm::DpoDisruptionOnly => {
                Some(ForgeConfig { mix: StrategyMix::disruption_only(), fallback: Fallback::WithinMix, ..c })
            }
            Arm::Rulealign | Arm::RulealignSubsample => Some(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub label: String,
    pub pairs: usize,
    pub pairs_by_strategy: BTreeMap<String, usize>,
    pub final_loss: Option<f64>,
    pub report: EvalReport,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub config_hash: String,
    pub dialogues: usize,
    pub quarantined: usize,
    pub train: usize,
    pub test: usize,
    pub vocab: usize,
    pub params: usize,
    pub heldout_pairs: usize,
    pub sft_final_loss: Option<f64>,
    pub arms: Vec<ArmResult>,
    #[serde(skip)]
    pub seconds: f64,
}

/// Per-arm medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub perplexity: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    pub length_rate: f64,
    pub compliance: f64,
    pub positive_margin: f64,
    pub pairs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<SeedRun>,
    pub medians: Vec<ArmSummary>,
}

impl AblationReport {
    pub fn median(&self, arm: Arm) -> Option<&ArmSummary> {
        let label = self.runs.first()?.arms.iter().find(|a| a.arm == arm)?.label.clone();
        self.medians.iter().find(|m| m.label == label)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}

fn summarize(runs: &[SeedRun]) -> Vec<ArmSummary> {
    let Some(first) = runs.first() else { return vec![] };
    first
        .arms
        .iter()
        .map(|a| {
            let col = |f: &dyn Fn(&ArmResult) -> f64| {
                let mut v: Vec<f64> =
                    runs.iter().filter_map(|r| r.arms.iter().find(|x| x.arm == a.arm)).map(f).collect();
                median(&mut v)
            };
            ArmSummary {
                label: a.label.clone(),
                perplexity: col(&|x| x.report.metrics.perplexity),
                rouge1: col(&|x| x.report.metrics.rouge1),
                rouge2: col(&|x| x.report.metrics.rouge2),
                rouge_l: col(&|x| x.report.metrics.rouge_l),
                bleu: col(&|x| x.report.metrics.bleu),
                length_rate: col(&|x| x.report.metrics.length_rate),
                compliance: col(&|x| x.report.compliance.rate),
                positive_margin: col(&|x| x.report.heldout.map(|h| h.positive_fraction).unwrap_or(0.0)),
                pairs: col(&|x| x.pairs as f64),
            }
        })
        .collect()
}

/// The corpus stages for one seed, in memory.
pub fn build_corpus(cfg: &ExperimentConfig, src: &Sources) -> Result<(BatchOutput, crate::corpus::Split), PipelineError> {
    let backend = src.backend(cfg)?;
    let records = src.qa_records(cfg)?;
    let raw = generate_stage(cfg, src, &records, backend.as_ref());
    let mut out = ruleify_stage(cfg, src, &raw.dialogues, backend.as_ref());
    let mut quarantine = raw.quarantine;
    quarantine.append(&mut out.quarantine);
    out.quarantine = quarantine;
    if out.dialogues.is_empty() {
        return Err(PipelineError::Data("generation produced no dialogues".into()));
    }
    let split = crate::corpus::split_corpus(&out.dialogues, cfg.corpus.test_fraction, cfg.stage_seed("split"))?;
    Ok((out, split))
}

/// Runs every configured arm for one seed: corpus, supervised training,
/// one forge per arm over a shared sample cache, preference training and
/// held-out evaluation.
pub fn run_seed(cfg: &ExperimentConfig) -> Result<SeedRun, PipelineError> {
    let started = Instant::now();
    let src = Sources::load(cfg)?;
    let (corpus, split) = build_corpus(cfg, &src)?;
    let tok = build_tokenizer(&corpus.dialogues, &src.world, cfg);
    let vocab = tok.len();
    let mut sft = new_policy(cfg, tok)?;
    let sft_log = train_sft(cfg, &mut sft, &split.train)?;
    log::info!("seed {}: sft done, loss {:?}", cfg.seed, sft_log.final_loss());
    let reference = sft.snapshot_reference();
    let heldout = heldout_pairs(cfg, &split.test, &sft)?;

    let mut cache = SampleCache::new();
    let mut arms = Vec::new();
    let mut rulealign_pairs: Option<Vec<PreferencePair>> = None;
    for &arm in &cfg.ablation.arms {
        let t = Instant::now();
        let label = arm.label(cfg.ablation.subsample);
        let (model, pairs, by_strategy, final_loss) = match arm.forge_config(&cfg.forge) {
            None => (None, 0, BTreeMap::new(), sft_log.final_loss()),
            Some(fc) => {
                let pairs = match (arm, &rulealign_pairs) {
                    (Arm::Rulealign | Arm::RulealignSubsample, Some(p)) => p.clone(),
                    _ => {
                        let out = forge(&fc, &split.train, &sft, &mut cache)?;
                        if matches!(arm, Arm::Rulealign | Arm::RulealignSubsample) {
                            rulealign_pairs = Some(out.pairs.clone());
                        }
                        out.pairs
                    }
                };
                let pairs = if arm == Arm::RulealignSubsample {
                    subsample_pairs(&pairs, cfg.ablation.subsample, cfg.stage_seed("subsample"))?
                } else {
                    pairs
                };
                let mut by = BTreeMap::new();
                for p in &pairs {
                    *by.entry(p.strategy.name().to_string()).or_insert(0) += 1;
                }
                if pairs.is_empty() {
                    return Err(PipelineError::Data(format!("arm {label} forged no pairs")));
                }
                let (policy, _, log) = train_dpo(cfg, &sft, &pairs)?;
                (Some(policy), pairs.len(), by, log.final_loss())
            }
        };
        let model = model.as_ref().unwrap_or(&sft);
        let (mut report, _) = evaluate(cfg, model, &split.test, &src.rules)?;
        report.heldout = Some(heldout_margins(cfg, model, &reference, &heldout)?);
        let seconds = t.elapsed().as_secs_f64();
        log::info!(
            "seed {} arm {label}: {} pairs, compliance {:.3}, positive margin {:.3}, {seconds:.1}s",
            cfg.seed,
            pairs,
            report.compliance.rate,
            report.heldout.map(|h| h.positive_fraction).unwrap_or(0.0)
        );
        arms.push(ArmResult { arm, label, pairs, pairs_by_strategy: by_strategy, final_loss, report, seconds });
    }
    Ok(SeedRun {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        dialogues: corpus.dialogues.len(),
        quarantined: corpus.quarantine.len(),
        train: split.train.len(),
        test: split.test.len(),
        vocab,
        params: sft.param_count(),
        heldout_pairs: heldout.len(),
        sft_final_loss: sft_log.final_loss(),
        arms,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport, PipelineError> {
    let runs = cfg.ablation.seeds.iter().map(|&s| run_seed(&cfg.with_seed(s))).collect::<Result<Vec<_>, _>>()?;
    let medians = summarize(&runs);
    Ok(AblationReport { runs, medians })
}

/// Console table of per-arm medians, metrics ×100 where applicable.
pub struct AblationTable<'a>(pub &'a AblationReport);

impl fmt::Display for AblationTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>7}",
            "arm", "pairs", "ppl", "rouge-1", "rouge-2", "rouge-l", "bleu", "len", "compliance", "margin+"
        )?;
        for m in &self.0.medians {
            writeln!(
                f,
                "{:<22} {:>7.0} {:>8.3} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.3} {:>10.1} {:>7.1}",
                m.label,
                m.pairs,
                m.perplexity,
                m.rouge1,
                m.rouge2,
                m.rouge_l,
                m.bleu,
                m.length_rate,
                100.0 * m.compliance,
                100.0 * m.positive_margin
            )?;
        }
        Ok(())
    }
}
