//! Dialogue generation: single-turn consultations become multi-turn
//! dialogues, which are then rewritten to follow a diagnostic rule.

mod backend;
mod trajectory;
mod world;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_transcript, Dialogue, Provenance, Role, Turn};
use crate::io::derive_seed;
use crate::rulemodel::{map_disease_name, render_rule_template, DiagnosticRule, DiseaseId, DiseaseNameMap, RuleError, RuleSet};
use crate::template::{defaults, Template, TemplateError};

pub use backend::{BackendError, BackendInfo, ChatBackend, FnBackend, HttpChatBackend, HttpConfig, Sampling, ScriptedBackend};
pub use trajectory::{unsupported_patient_words, validate_trajectory, Pending, StageTagger, TrajectoryReport, ANSWER_WORDS};
pub use world::{RuleWorld, SyntheticBackend, WorldDisease};

/// Line prefixes that open a turn in backend output.
pub const ROLE_PREFIXES: &[(&str, Role)] = &[
    ("Patient:", Role::Patient),
    ("Doctor:", Role::Physician),
    ("Physician:", Role::Physician),
    ("患者：", Role::Patient),
    ("医生：", Role::Physician),
    ("患者:", Role::Patient),
    ("医生:", Role::Physician),
];

#[derive(Debug, Error)]
pub enum GenError {
    #[error("backend failed after {attempts} attempt(s): {source}")]
    BackendFailure { attempts: usize, source: BackendError },
    #[error("malformed dialogue: {0}")]
    MalformedDialogue(String),
    #[error("rule violation after {attempts} attempt(s): {}", failures.join("; "))]
    RuleViolation { attempts: usize, failures: Vec<String> },
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error("template: {0}")]
    Template(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

impl From<TemplateError> for GenError {
    fn from(e: TemplateError) -> Self {
        GenError::Template(e.to_string())
    }
}

/// A single-turn consultation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub disease_raw: String,
    pub source_id: String,
}

#[derive(Debug, Clone)]
pub struct Templates {
    /// Renders a rule's trajectory and evidence.
    pub rule: Template,
    /// Needs `{{QUESTION}}` and `{{DISEASE}}`.
    pub convert: Template,
    /// Needs `{{RULE_PHYSICIAN}}` and `{{DIALOGUES}}`.
    pub ruleify: Template,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            rule: Template::parse(defaults::RULE).expect("built-in template parses"),
            convert: Template::parse(defaults::CONVERT).expect("built-in template parses"),
            ruleify: Template::parse(defaults::RULEIFY).expect("built-in template parses"),
        }
    }
}

fn require(t: &Template, names: &[&str]) -> Result<(), GenError> {
    for n in names {
        if !t.has_placeholder(n) {
            return Err(GenError::Template(format!("template lacks the {{{{{n}}}}} placeholder")));
        }
    }
    Ok(())
}

impl Templates {
    /// Loads `rule.txt`, `convert.txt` and `ruleify.txt` from `dir`; missing
    /// files fall back to the built-in text.
    pub fn load(dir: &Path) -> Result<Self, GenError> {
        let read = |name: &str, fallback: &str| -> Result<Template, GenError> {
            let p = dir.join(name);
            let text = if p.exists() {
                std::fs::read_to_string(&p).map_err(|e| GenError::Template(format!("{}: {e}", p.display())))?
            } else {
                fallback.to_string()
            };
            Ok(Template::parse(&text)?)
        };
        let t = Self {
            rule: read("rule.txt", defaults::RULE)?,
            convert: read("convert.txt", defaults::CONVERT)?,
            ruleify: read("ruleify.txt", defaults::RULEIFY)?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), GenError> {
        require(&self.convert, &["QUESTION", "DISEASE"])?;
        require(&self.ruleify, &["RULE_PHYSICIAN", "DIALOGUES"])
    }

    /// Digest over all three template texts.
    pub fn digest(&self) -> String {
        crate::template::sha256_hex(
            [self.rule.digest(), self.convert.digest(), self.ruleify.digest()].join(":").as_bytes(),
        )
    }
}

/// Splits backend output into turns at role-prefix lines. Text before the
/// first prefix is ignored; unprefixed lines continue the current turn.
pub fn parse_transcript(text: &str) -> Result<Vec<Turn>, GenError> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in text.lines() {
        let l = line.trim();
        if l.is_empty() {
            continue;
        }
        let opened = ROLE_PREFIXES.iter().find_map(|(p, role)| l.strip_prefix(p).map(|rest| (*role, rest.trim())));
        match opened {
            Some((role, rest)) => turns.push(Turn { role, text: rest.to_string(), stage: None }),
            None => {
                if let Some(t) = turns.last_mut() {
                    if !t.text.is_empty() {
                        t.text.push(' ');
                    }
                    t.text.push_str(l);
                }
            }
        }
    }
    check_shape(&turns)?;
    Ok(turns)
}

fn check_shape(turns: &[Turn]) -> Result<(), GenError> {
    let bad = |m: String| Err(GenError::MalformedDialogue(m));
    if turns.is_empty() {
        return bad("no turns found".into());
    }
    if turns[0].role != Role::Patient {
        return bad("first turn is not the patient's".into());
    }
    if turns.last().map(|t| t.role) != Some(Role::Physician) {
        return bad("last turn is not the physician's".into());
    }
    if let Some(i) = turns.windows(2).position(|w| w[0].role == w[1].role) {
        return bad(format!("turns {} and {} have the same speaker", i, i + 1));
    }
    if let Some(i) = turns.iter().position(|t| t.text.is_empty()) {
        return bad(format!("turn {i} is empty"));
    }
    Ok(())
}

fn attempt_seed(base: u64, attempt: usize) -> u64 {
    base.wrapping_add(attempt as u64)
}

/// Expands a consultation into a multi-turn dialogue through `backend`.
pub fn synthesize_dialogue(
    qa: &QaRecord,
    disease: &DiseaseId,
    backend: &dyn ChatBackend,
    template: &Template,
    sampling: &Sampling,
    tagger: &StageTagger,
) -> Result<Dialogue, GenError> {
    require(template, &["QUESTION", "DISEASE"])?;
    if qa.question.trim().is_empty() {
        return Err(GenError::InvalidRecord(format!("{}: empty question", qa.source_id)));
    }
    let prompt = template.render(&BTreeMap::from([
        ("QUESTION", qa.question.clone()),
        ("DISEASE", disease.canonical_name.clone()),
    ]))?;
    let mut last = None;
    for attempt in 0..=sampling.max_retries {
        let seed = attempt_seed(sampling.seed, attempt);
        let text = match backend.complete(&prompt, sampling.temperature, seed) {
            Ok(t) => t,
            Err(source) => {
                last = Some(GenError::BackendFailure { attempts: attempt + 1, source });
                continue;
            }
        };
        let turns = match parse_transcript(&text) {
            Ok(t) => t,
            Err(e) => {
                last = Some(e);
                continue;
            }
        };
        let closing = turns.last().expect("shape checked");
        if !tagger.is_diagnosis(&closing.text) {
            last = Some(GenError::MalformedDialogue("final physician turn carries no diagnosis".into()));
            continue;
        }
        return Ok(Dialogue {
            id: qa.source_id.clone(),
            disease: disease.clone(),
            turns,
            provenance: Provenance { source_id: qa.source_id.clone(), backend: backend.info().model, seed },
        });
    }
    Err(last.expect("at least one attempt"))
}

/// Rewrites `dialogue` to follow `rule`, regenerating with the next seed
/// until the result validates or the retries run out.
pub fn ruleify_dialogue(
    dialogue: &Dialogue,
    rule: &DiagnosticRule,
    backend: &dyn ChatBackend,
    templates: &Templates,
    sampling: &Sampling,
    tagger: &StageTagger,
) -> Result<Dialogue, GenError> {
    require(&templates.ruleify, &["RULE_PHYSICIAN", "DIALOGUES"])?;
    check_shape(&dialogue.turns)?;
    let prompt = templates.ruleify.render(&BTreeMap::from([
        ("RULE_PHYSICIAN", render_rule_template(rule, &templates.rule)?),
        ("DIALOGUES", render_transcript(&dialogue.turns)),
    ]))?;
    let mut last = None;
    let attempts = sampling.max_retries + 1;
    for attempt in 0..attempts {
        let seed = attempt_seed(sampling.seed, attempt);
        let text = match backend.complete(&prompt, sampling.temperature, seed) {
            Ok(t) => t,
            Err(source) => {
                last = Some(GenError::BackendFailure { attempts: attempt + 1, source });
                continue;
            }
        };
        let turns = match parse_transcript(&text) {
            Ok(t) => t,
            Err(e) => {
                last = Some(e);
                continue;
            }
        };
        let mut out = Dialogue {
            id: dialogue.id.clone(),
            disease: rule.disease.clone(),
            turns,
            provenance: Provenance {
                source_id: dialogue.provenance.source_id.clone(),
                backend: backend.info().model,
                seed,
            },
        };
        let report = tagger.validate(&out, rule);
        let mut failures: Vec<String> = report.failures().into_iter().map(str::to_string).collect();
        let invented = unsupported_patient_words(&out, dialogue, rule);
        if !invented.is_empty() {
            let words: Vec<&str> = invented.iter().map(|(_, w)| w.as_str()).collect();
            failures.push(format!("patient states unsupported facts: {}", words.join(" ")));
        }
        if failures.is_empty() {
            tagger.tag_dialogue(&mut out, rule);
            return Ok(out);
        }
        log::debug!("{}: attempt {} rejected: {}", dialogue.id, attempt + 1, failures.join("; "));
        last = Some(GenError::RuleViolation { attempts: attempt + 1, failures });
    }
    Err(last.expect("at least one attempt"))
}

/// One consultation to turn into a training dialogue.
#[derive(Debug, Clone)]
pub struct GenerationJob {
    pub qa: QaRecord,
    pub rule: DiagnosticRule,
    pub templates: Arc<Templates>,
    pub sampling: Sampling,
    /// Also rewrite the converted dialogue to follow the rule.
    pub ruleify: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub source_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutput {
    pub dialogues: Vec<Dialogue>,
    pub quarantine: Vec<QuarantineEntry>,
}

fn quarantine(source_id: &str, stage: &str, e: GenError) -> QuarantineEntry {
    QuarantineEntry { source_id: source_id.into(), stage: stage.into(), error: e.to_string() }
}

fn run_job(job: &GenerationJob, backend: &dyn ChatBackend, names: &DiseaseNameMap, tagger: &StageTagger) -> Result<Dialogue, QuarantineEntry> {
    let id = &job.qa.source_id;
    let disease = map_disease_name(&job.qa.disease_raw, names).map_err(|e| quarantine(id, "map", e.into()))?;
    if disease != job.rule.disease {
        return Err(quarantine(
            id,
            "map",
            GenError::InvalidRecord(format!("{} maps to {} but the job's rule is for {}", job.qa.disease_raw, disease, job.rule.disease)),
        ));
    }
    let converted = synthesize_dialogue(&job.qa, &disease, backend, &job.templates.convert, &job.sampling, tagger)
        .map_err(|e| quarantine(id, "convert", e))?;
    if !job.ruleify {
        return Ok(converted);
    }
    let sampling = Sampling { seed: derive_seed(job.sampling.seed, &["ruleify"]), ..job.sampling };
    ruleify_dialogue(&converted, &job.rule, backend, &job.templates, &sampling, tagger).map_err(|e| quarantine(id, "ruleify", e))
}

fn pool(parallelism: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build().expect("thread pool")
}

fn collect(results: Vec<Result<Dialogue, QuarantineEntry>>) -> BatchOutput {
    let mut out = BatchOutput::default();
    for r in results {
        match r {
            Ok(d) => out.dialogues.push(d),
            Err(q) => out.quarantine.push(q),
        }
    }
    out
}

/// Runs jobs on at most `parallelism` workers. Each job lands in exactly
/// one of the outputs, in input order.
pub fn run_generation_batch(
    jobs: &[GenerationJob],
    backend: &dyn ChatBackend,
    parallelism: usize,
    names: &DiseaseNameMap,
    tagger: &StageTagger,
) -> BatchOutput {
    let results = pool(parallelism).install(|| jobs.par_iter().map(|j| run_job(j, backend, names, tagger)).collect());
    collect(results)
}

/// Maps every record's disease to its rule and runs the batch; records
/// whose disease has no rule are quarantined in place.
#[allow(clippy::too_many_arguments)]
pub fn generate_corpus(
    records: &[QaRecord],
    rules: &RuleSet,
    names: &DiseaseNameMap,
    templates: Arc<Templates>,
    sampling: &Sampling,
    ruleify: bool,
    backend: &dyn ChatBackend,
    parallelism: usize,
) -> BatchOutput {
    let tagger = StageTagger::default();
    let planned: Vec<Result<GenerationJob, QuarantineEntry>> = records
        .iter()
        .map(|qa| {
            let id = map_disease_name(&qa.disease_raw, names).map_err(|e| quarantine(&qa.source_id, "map", e.into()))?;
            let rule = rules.get(&id.canonical_name).ok_or_else(|| {
                quarantine(&qa.source_id, "map", GenError::InvalidRecord(format!("no rule for {id}")))
            })?;
            Ok(GenerationJob {
                qa: qa.clone(),
                rule: rule.clone(),
                templates: templates.clone(),
                sampling: Sampling { seed: derive_seed(sampling.seed, &["gen", &qa.source_id]), ..*sampling },
                ruleify,
            })
        })
        .collect();
    let results = pool(parallelism).install(|| {
        planned
            .par_iter()
            .map(|p| match p {
                Ok(job) => run_job(job, backend, names, &tagger),
                Err(q) => Err(q.clone()),
            })
            .collect()
    });
    collect(results)
}

/// Rewrites existing dialogues under their diseases' rules.
pub fn ruleify_corpus(
    dialogues: &[Dialogue],
    rules: &RuleSet,
    templates: &Templates,
    sampling: &Sampling,
    backend: &dyn ChatBackend,
    parallelism: usize,
) -> BatchOutput {
    let tagger = StageTagger::default();
    let results = pool(parallelism).install(|| {
        dialogues
            .par_iter()
            .map(|d| {
                let rule = rules.get(&d.disease.canonical_name).ok_or_else(|| {
                    quarantine(&d.id, "map", GenError::InvalidRecord(format!("no rule for {}", d.disease)))
                })?;
                let s = Sampling { seed: derive_seed(sampling.seed, &["ruleify", &d.id]), ..*sampling };
                ruleify_dialogue(d, rule, backend, templates, &s, &tagger).map_err(|e| quarantine(&d.id, "ruleify", e))
            })
            .collect()
    });
    collect(results)
}
