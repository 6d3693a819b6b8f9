//! File-level commands: each reads its inputs from the configured
//! directories, writes stamped artifacts and returns a console summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::*;
use crate::align::StepRecord;
use crate::corpus::{compute_stats, CorpusManifest, CorpusStats, DegenerateSplit};
use crate::io::{write_json, write_jsonl, ArtifactMeta, Stamped};
use crate::pairforge::ForgeReport;
use crate::policy::{checkpoint_hash, CheckpointHeader, CheckpointInfo, Phase};
use crate::spsim::{honesty_violations, run_sp_battery, SpReport, SpTable};
use crate::textmetrics::ReportTable;

fn meta(cfg: &ExperimentConfig, kind: &str) -> ArtifactMeta {
    ArtifactMeta::new(kind, &cfg.hash(), cfg.seed)
}

fn stamp<T>(cfg: &ExperimentConfig, kind: &str, data: T) -> Stamped<T> {
    Stamped { meta: meta(cfg, kind), data }
}

fn require(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Data(format!("{what} not found at {}", path.display())))
    }
}

fn read_dialogues(path: &Path, what: &str) -> Result<Vec<Dialogue>, PipelineError> {
    require(path, what)?;
    Ok(read_jsonl(path)?.1)
}

fn manifest(cfg: &ExperimentConfig, src: &Sources, backend: &dyn ChatBackend, out: &BatchOutput) -> CorpusManifest {
    let mut template_hashes = BTreeMap::new();
    template_hashes.insert("rule".into(), src.templates.rule.digest());
    template_hashes.insert("convert".into(), src.templates.convert.digest());
    template_hashes.insert("ruleify".into(), src.templates.ruleify.digest());
    CorpusManifest {
        source: cfg.paths.qa.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "world".into()),
        backend: backend.info().model,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        template_hashes,
        bounds: cfg.corpus.bounds,
        scheme: cfg.scheme,
        dialogues: out.dialogues.len(),
        quarantined: out.quarantine.len(),
    }
}

fn write_batch(cfg: &ExperimentConfig, stem: &str, m: &CorpusManifest, out: &BatchOutput) -> Result<(), PipelineError> {
    let dir = &cfg.paths.corpus;
    write_jsonl(&dir.join(format!("{stem}.jsonl")), Some(&meta(cfg, stem)), &out.dialogues)?;
    write_jsonl(&dir.join(format!("{stem}.quarantine.jsonl")), Some(&meta(cfg, "quarantine")), &out.quarantine)?;
    write_json(&dir.join(format!("{stem}.manifest.json")), &stamp(cfg, "manifest", m))?;
    Ok(())
}

/// Single-turn records to raw dialogues.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<String, PipelineError> {
    let src = Sources::load(cfg)?;
    let backend = src.backend(cfg)?;
    let records = src.qa_records(cfg)?;
    let out = generate_stage(cfg, &src, &records, backend.as_ref());
    let m = manifest(cfg, &src, backend.as_ref(), &out);
    write_batch(cfg, "converted", &m, &out)?;
    if out.dialogues.is_empty() {
        return Err(PipelineError::Data(format!("all {} records were quarantined", records.len())));
    }
    Ok(format!(
        "{} records: {} dialogues, {} quarantined -> {}\n",
        records.len(),
        out.dialogues.len(),
        out.quarantine.len(),
        cfg.paths.converted().display()
    ))
}

/// Raw dialogues to rule-compliant ones, with corpus statistics.
pub fn cmd_ruleify(cfg: &ExperimentConfig) -> Result<String, PipelineError> {
    let src = Sources::load(cfg)?;
    let raw = read_dialogues(&cfg.paths.converted(), "converted dialogues (run gen first)")?;
    let backend = src.backend(cfg)?;
    let out = ruleify_stage(cfg, &src, &raw, backend.as_ref());
    let m = manifest(cfg, &src, backend.as_ref(), &out);
    write_batch(cfg, "dialogues", &m, &out)?;
    let stats = compute_stats(&out.dialogues, cfg.scheme);
    write_json(&cfg.paths.corpus.join("stats.json"), &stamp(cfg, "stats", &stats))?;
    if out.dialogues.is_empty() {
        return Err(PipelineError::Data(format!("all {} dialogues were quarantined", raw.len())));
    }
    Ok(format!(
        "{} dialogues, {} quarantined, rounds {}..{}, round tokens {}..{} -> {}\n",
        out.dialogues.len(),
        out.quarantine.len(),
        stats.min_rounds,
        stats.max_rounds,
        stats.min_round_tokens,
        stats.max_round_tokens,
        cfg.paths.dialogues().display()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: usize,
    pub test: usize,
    pub train_stats: CorpusStats,
    pub test_stats: CorpusStats,
    pub warnings: Vec<DegenerateSplit>,
}

pub fn cmd_split(cfg: &ExperimentConfig) -> Result<String, PipelineError> {
    let dialogues = read_dialogues(&cfg.paths.dialogues(), "dialogues (run ruleify first)")?;
    let split = crate::corpus::split_corpus(&dialogues, cfg.corpus.test_fraction, cfg.stage_seed("split"))?;
    write_jsonl(&cfg.paths.train_split(), Some(&meta(cfg, "train")), &split.train)?;
    write_jsonl(&cfg.paths.test_split(), Some(&meta(cfg, "test")), &split.test)?;
    let summary = SplitSummary {
        train: split.train.len(),
        test: split.test.len(),
        train_stats: compute_stats(&split.train, cfg.scheme),
        test_stats: compute_stats(&split.test, cfg.scheme),
        warnings: split.warnings,
    };
    write_json(&cfg.paths.corpus.join("split.json"), &stamp(cfg, "split", &summary))?;
    Ok(format!("train {} / test {} ({} warnings)\n", summary.train, summary.test, summary.warnings.len()))
}

fn write_log(cfg: &ExperimentConfig, name: &str, steps: &[StepRecord]) -> Result<(), PipelineError> {
    write_jsonl(&cfg.paths.checkpoints.join(format!("{name}.log.jsonl")), Some(&meta(cfg, "train-log")), steps)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, phase: Option<Phase>) -> Result<(PolicyModel<f64>, CheckpointHeader, String), PipelineError> {
    require(path, "checkpoint")?;
    let (model, header) = PolicyModel::<f64>::load(path)?;
    if let Some(p) = phase {
        if header.phase != p {
            return Err(PipelineError::Data(format!("{} holds a {:?} checkpoint, expected {p:?}", path.display(), header.phase)));
        }
    }
    let hash = checkpoint_hash(path)?;
    Ok((model, header, hash))
}

pub fn cmd_train_sft(cfg: &ExperimentConfig) -> Result<String, PipelineError> {
    let src = Sources::load(cfg)?;
    let train = read_dialogues(&cfg.paths.train_split(), "train split (run split first)")?;
    let all = read_dialogues(&cfg.paths.dialogues(), "dialogues")?;
    let mut policy = new_policy(cfg, build_tokenizer(&all, &src.world, cfg))?;
    let log = train_sft(cfg, &mut policy, &train)?;
    let info = CheckpointInfo { parent: None, reference: None, config_hash: cfg.hash(), seed: cfg.seed };
    let hash = policy.save(&cfg.paths.sft_checkpoint(), Phase::Sft, &info)?;
    write_log(cfg, "sft", &log.steps)?;
    Ok(format!(
        "sft: {} steps, final loss {:.6}, {} parameters, vocab {} -> {} ({hash})\n",
        log.steps.len(),
        log.final_loss().unwrap_or(f64::NAN),
        policy.param_count(),
        policy.tokenizer().len(),
        cfg.paths.sft_checkpoint().display()
    ))
}

pub fn cmd_forge(cfg: &ExperimentConfig) -> Result<String, PipelineError> {
    let (sft, _, _) = load_checkpoint(&cfg.paths.sft_checkpoint(), Some(Phase::Sft))?;
    let train = read_dialogues(&cfg.paths.train_split(), "train split")?;
    let out = forge(&cfg.forge, &train, &sft, &mut SampleCache::new())?;
    write_jsonl(&cfg.paths.pairs(), Some(&meta(cfg, "pairs")), &out.pairs)?;
    write_json(&cfg.paths.corpus.join("pairs.report.json"), &stamp(cfg, "forge-report", &out.report))?;
    Ok(format_forge(&out.report))
}

fn format_forge(r: &ForgeReport) -> String {
    let mut s = format!("{} contexts -> {} pairs ({} via fallback, {} dropped)\n", r.contexts, r.pairs, r.fallbacks, r.dropped);
    for (k, v) in &r.by_strategy {
        let _ = writeln!(s, "  {k:<20} {v}");
    }
    s
}

pub fn cmd_train_dpo(cfg: &ExperimentConfig) -> Result<String, PipelineError> {
    let sft_path = cfg.paths.sft_checkpoint();
    require(&sft_path, "sft checkpoint (preference training starts from it)")?;
    require(&cfg.paths.pairs(), "preference pairs (run forge first)")?;
    let (sft, _, sft_hash) = load_checkpoint(&sft_path, Some(Phase::Sft))?;
    let pairs: Vec<PreferencePair> = read_jsonl(&cfg.paths.pairs())?.1;
    let (policy, _, log) = train_dpo(cfg, &sft, &pairs)?;
    let info =
        CheckpointInfo { parent: Some(sft_hash.clone()), reference: Some(sft_hash), config_hash: cfg.hash(), seed: cfg.seed };
    let hash = policy.save(&cfg.paths.dpo_checkpoint(), Phase::Dpo, &info)?;
    write_log(cfg, "dpo", &log.steps)?;
    let last = log.steps.last();
    Ok(format!(
        "dpo: {} pairs, {} steps, final loss {:.6}, margin {:.4} -> {} ({hash})\n",
        pairs.len(),
        log.steps.len(),
        log.final_loss().unwrap_or(f64::NAN),
        last.and_then(|s| s.margin_mean).unwrap_or(f64::NAN),
        cfg.paths.dpo_checkpoint().display()
    ))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Single-round metrics and compliance on the test split. A preference
/// checkpoint whose reference is the configured supervised checkpoint also
/// gets held-out margins.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<String, PipelineError> {
    let src = Sources::load(cfg)?;
    let (policy, header, _) = load_checkpoint(checkpoint, None)?;
    let test = read_dialogues(&cfg.paths.test_split(), "test split (run split first)")?;
    let (mut report, gens) = evaluate(cfg, &policy, &test, &src.rules)?;
    if let Some(ref_hash) = &header.reference {
        let sft_path = cfg.paths.sft_checkpoint();
        if sft_path.exists() && &checkpoint_hash(&sft_path)? == ref_hash {
            let (sft, _, _) = load_checkpoint(&sft_path, Some(Phase::Sft))?;
            let pairs = heldout_pairs(cfg, &test, &sft)?;
            report.heldout = Some(heldout_margins(cfg, &policy, &sft.snapshot_reference(), &pairs)?);
        } else {
            log::warn!("reference {ref_hash} not found at {}; skipping held-out margins", sft_path.display());
        }
    }
    let name = stem(checkpoint);
    let dir = &cfg.paths.reports;
    write_json(&dir.join(format!("eval-{name}.json")), &stamp(cfg, "eval", &report))?;
    write_jsonl(&dir.join(format!("eval-{name}.generations.jsonl")), Some(&meta(cfg, "generations")), &gens)?;
    let mut s = ReportTable(&[(name, report.metrics.clone())]).to_string();
    let _ = writeln!(s, "compliance {}/{} = {:.3}", report.compliance.compliant, report.compliance.contexts, report.compliance.rate);
    if let Some(h) = report.heldout {
        let _ = writeln!(s, "held-out pairs {}: positive margin {:.3}, mean margin {:.4}", h.pairs, h.positive_fraction, h.margin_mean);
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpSummary {
    pub rubric: String,
    pub cases: usize,
    pub physicians: Vec<String>,
    pub aggregates: Vec<SpReport>,
    pub ranks: BTreeMap<String, Vec<usize>>,
    pub honesty_violations: usize,
}

/// Runs the simulated-patient battery against each checkpoint.
pub fn cmd_sp(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<String, PipelineError> {
    if checkpoints.is_empty() {
        return Err(PipelineError::Config("sp-test needs at least one checkpoint".into()));
    }
    let src = Sources::load(cfg)?;
    let models = checkpoints
        .iter()
        .map(|p| Ok((stem(p), load_checkpoint(p, None)?.0)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let cases = world_cases(&src.world, cfg.sp.cases, cfg.stage_seed("sp-cases"), cfg.sp.max_turns);
    let physicians: Vec<(&str, &PolicyModel<f64>)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let battery = run_sp_battery(&physicians, &cases, &src.rules, &cfg.sp.decode)?;
    let mut violations = 0;
    let dir = &cfg.paths.reports;
    for p in &battery.physicians {
        violations += p.transcripts.iter().zip(&cases).map(|(t, c)| honesty_violations(t, c).len()).sum::<usize>();
        write_jsonl(&dir.join(format!("sp-{}.transcripts.jsonl", p.name)), Some(&meta(cfg, "sp-transcripts")), &p.transcripts)?;
        write_jsonl(&dir.join(format!("sp-{}.reports.jsonl", p.name)), Some(&meta(cfg, "sp-reports")), &p.reports)?;
    }
    let summary = SpSummary {
        rubric: crate::spsim::RUBRIC_VERSION.into(),
        cases: cases.len(),
        physicians: battery.physicians.iter().map(|p| p.name.clone()).collect(),
        aggregates: battery.physicians.iter().map(|p| p.aggregate.clone()).collect(),
        ranks: battery.ranks.clone(),
        honesty_violations: violations,
    };
    write_json(&dir.join("sp.json"), &stamp(cfg, "sp", &summary))?;
    if violations > 0 {
        return Err(PipelineError::Data(format!("{violations} patient utterances fell outside their case repository")));
    }
    Ok(format!("{} cases\n{}\n", cases.len(), SpTable(&battery)))
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<String, PipelineError> {
    let report = run_ablation(cfg)?;
    write_json(&cfg.paths.reports.join("ablation.json"), &stamp(cfg, "ablation", &report))?;
    Ok(AblationTable(&report).to_string())
}
