//! Standardized-patient testing: a patient that answers only from its case
//! repository, a dialogue loop against a physician policy, and rubric
//! scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_context, Dialogue, Role, Turn};
use crate::genpipeline::{RuleWorld, StageTagger};
use crate::io::derive_seed;
use crate::policy::{DecodeConfig, PolicyError, SequenceModel};
use crate::rulemodel::{DiagnosticRule, DiseaseId, HistoryCategory, RuleSet};
use crate::scalar::Scalar;
use crate::text::Haystack;

pub const RUBRIC_VERSION: &str = "sp-rubric-v1";

/// Reply when no stored fact matches the question.
pub const HONEST_ABSENCE: &str = "i do not know , please ask other questions , doctor !";

#[derive(Debug, Error)]
pub enum SpError {
    #[error("case {case}: max_turns must be at least 2")]
    TooFewTurns { case: String },
    #[error("no rule for disease {0}")]
    MissingRule(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// A stored fact: the term it answers and the exact reply text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub key: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryFact {
    pub category: HistoryCategory,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpCase {
    pub id: String,
    pub disease: DiseaseId,
    pub chief_complaint: String,
    pub symptoms: Vec<Fact>,
    /// Keyed by canonical exam name.
    pub exams: Vec<Fact>,
    pub history: Vec<HistoryFact>,
    pub max_turns: usize,
}

fn dedup_facts(facts: &mut Vec<Fact>) {
    let mut seen = BTreeSet::new();
    facts.retain(|f| seen.insert(f.key.clone()));
}

impl SpCase {
    /// A case for `disease` of `world`: its symptoms, a result for every
    /// exam the world knows (normal outside the disease's key exams) and
    /// one seeded answer per history category.
    pub fn from_world(world: &RuleWorld, disease: &str, id: &str, seed: u64, max_turns: usize) -> Option<Self> {
        let d = world.disease(disease)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut symptoms: Vec<Fact> = std::iter::once(&d.chief_complaint)
            .chain(&d.other_symptoms)
            .map(|s| Fact { key: s.clone(), text: format!("yes , i have {s} .") })
            .collect();
        dedup_facts(&mut symptoms);
        let mut exams: Vec<Fact> = d
            .exams
            .iter()
            .zip(&d.findings)
            .map(|(e, f)| Fact { key: e.clone(), text: format!("the {e} showed {f} .") })
            .collect();
        let mut others: BTreeSet<&str> = world.diseases.iter().flat_map(|o| o.exams.iter().map(String::as_str)).collect();
        others.extend(world.extra_exams.iter().map(|(e, _)| e.as_str()));
        for e in others {
            if !d.exams.iter().any(|k| k == e) {
                let result = world.extra_exams.iter().find(|(x, _)| x == e).map(|(_, r)| r.as_str()).unwrap_or("nothing abnormal");
                exams.push(Fact { key: e.to_string(), text: format!("the {e} showed {result} .") });
            }
        }
        dedup_facts(&mut exams);
        let history = HistoryCategory::ALL
            .iter()
            .filter_map(|c| {
                world.history_facts.get(c).and_then(|v| v.choose(&mut rng)).map(|t| HistoryFact { category: *c, text: t.clone() })
            })
            .collect();
        Some(Self {
            id: id.into(),
            disease: DiseaseId::new(&d.name, &d.code),
            chief_complaint: format!("doctor , i have {} .", d.chief_complaint),
            symptoms,
            exams,
            history,
            max_turns,
        })
    }

    /// Every text the patient may say.
    pub fn repository(&self) -> Vec<&str> {
        let mut out = vec![self.chief_complaint.as_str(), HONEST_ABSENCE];
        out.extend(self.symptoms.iter().map(|f| f.text.as_str()));
        out.extend(self.exams.iter().map(|f| f.text.as_str()));
        out.extend(self.history.iter().map(|f| f.text.as_str()));
        out
    }
}

/// `n` cases spread round-robin over the world's diseases.
pub fn world_cases(world: &RuleWorld, n: usize, seed: u64, max_turns: usize) -> Vec<SpCase> {
    (0..n)
        .map(|i| {
            let d = &world.diseases[i % world.diseases.len()];
            let id = format!("sp{i:04}");
            SpCase::from_world(world, &d.name, &id, derive_seed(seed, &["case", &id]), max_turns).expect("disease exists")
        })
        .collect()
}

/// Keys of the facts a question retrieves, in repository order.
fn retrieve(case: &SpCase, utterance: &str) -> Vec<(String, String)> {
    let h = Haystack::new(utterance);
    let mut out = Vec::new();
    for f in case.symptoms.iter().chain(&case.exams) {
        if h.mentions(&f.key) {
            out.push((f.key.clone(), f.text.clone()));
        }
    }
    for f in &case.history {
        if f.category.keywords().iter().any(|k| h.mentions(k)) {
            out.push((format!("history:{}", f.category.label()), f.text.clone()));
        }
    }
    out
}

/// The patient's reply: matched facts verbatim, or the honest-absence line.
pub fn patient_respond(case: &SpCase, physician_utterance: &str) -> String {
    let facts = retrieve(case, physician_utterance);
    if facts.is_empty() {
        return HONEST_ABSENCE.to_string();
    }
    facts.into_iter().map(|(_, t)| t).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnAnnotation {
    /// Fact keys revealed by a patient turn.
    pub facts_revealed: Vec<String>,
    /// Exams named by a physician turn.
    pub exams_requested: Vec<String>,
    pub diagnosis: bool,
    /// The diagnosis names the case's disease.
    pub names_target: bool,
    pub treatment: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpTranscript {
    pub case_id: String,
    pub turns: Vec<Turn>,
    /// One per turn.
    pub annotations: Vec<TurnAnnotation>,
    pub terminated_by_diagnosis: bool,
    pub truncated: bool,
}

impl SpTranscript {
    fn as_dialogue(&self, case: &SpCase) -> Dialogue {
        Dialogue { id: self.case_id.clone(), disease: case.disease.clone(), turns: self.turns.clone(), provenance: Default::default() }
    }
}

fn annotate_physician(case: &SpCase, text: &str, tagger: &StageTagger) -> TurnAnnotation {
    let h = Haystack::new(text);
    let diagnosis = tagger.is_diagnosis(text);
    TurnAnnotation {
        facts_revealed: vec![],
        exams_requested: case.exams.iter().filter(|f| h.mentions(&f.key)).map(|f| f.key.clone()).collect(),
        diagnosis,
        names_target: diagnosis && h.mentions(&case.disease.canonical_name),
        treatment: tagger.is_treatment(text),
    }
}

/// Alternates patient and physician turns from the chief complaint until
/// the physician diagnoses or `max_turns` is reached.
pub fn run_sp_dialogue<S: Scalar, M: SequenceModel<S> + ?Sized>(
    physician: &M,
    case: &SpCase,
    decode: &DecodeConfig,
) -> Result<SpTranscript, SpError> {
    if case.max_turns < 2 {
        return Err(SpError::TooFewTurns { case: case.id.clone() });
    }
    let tagger = StageTagger::default();
    let tok = physician.tokenizer();
    let mut turns = vec![Turn::patient(case.chief_complaint.clone())];
    let chief_keys = case.symptoms.first().map(|f| vec![f.key.clone()]).unwrap_or_default();
    let mut annotations = vec![TurnAnnotation { facts_revealed: chief_keys, ..Default::default() }];
    let mut terminated = false;
    let mut truncated = false;
    while turns.len() < case.max_turns {
        let ctx = tok.encode_context(&render_context(&turns));
        if ctx.len() + 1 >= physician.context_window() {
            truncated = true;
            break;
        }
        let step = DecodeConfig { seed: derive_seed(decode.seed, &[&case.id, &turns.len().to_string()]), ..*decode };
        let text = tok.decode(&physician.sample(&ctx, &step)?);
        let ann = annotate_physician(case, &text, &tagger);
        let done = ann.diagnosis;
        turns.push(Turn::physician(text));
        annotations.push(ann);
        if done {
            terminated = true;
            break;
        }
        if turns.len() >= case.max_turns {
            break;
        }
        let facts = retrieve(case, &turns.last().expect("just pushed").text);
        let reply = patient_respond(case, &turns.last().expect("just pushed").text);
        turns.push(Turn::patient(reply));
        annotations.push(TurnAnnotation { facts_revealed: facts.into_iter().map(|(k, _)| k).collect(), ..Default::default() });
    }
    Ok(SpTranscript { case_id: case.id.clone(), turns, annotations, terminated_by_diagnosis: terminated, truncated: truncated || !terminated })
}

/// Patient turns that are not a concatenation of repository texts.
pub fn honesty_violations(transcript: &SpTranscript, case: &SpCase) -> Vec<usize> {
    let repo = case.repository();
    transcript
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.role == Role::Patient && !composed_of(&t.text, &repo))
        .map(|(i, _)| i)
        .collect()
}

fn composed_of(text: &str, parts: &[&str]) -> bool {
    let rest = text.trim();
    if rest.is_empty() {
        return true;
    }
    parts.iter().any(|p| rest.strip_prefix(p).is_some_and(|r| (r.is_empty() || r.starts_with(' ')) && composed_of(r, parts)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpReport {
    pub case_id: String,
    pub information_completeness: f64,
    pub guidance_rationality: f64,
    pub diagnostic_logicality: f64,
    /// Physician turns held.
    pub clinical_applicability: f64,
    pub treatment_logicality: f64,
    pub rubric: String,
}

impl SpReport {
    pub const METRICS: [&'static str; 5] = [
        "information completeness",
        "guidance rationality",
        "diagnostic logicality",
        "clinical applicability",
        "treatment logicality",
    ];

    pub fn values(&self) -> [f64; 5] {
        [
            self.information_completeness,
            self.guidance_rationality,
            self.diagnostic_logicality,
            self.clinical_applicability,
            self.treatment_logicality,
        ]
    }

    fn from_values(case_id: &str, v: [f64; 5]) -> Self {
        Self {
            case_id: case_id.into(),
            information_completeness: v[0],
            guidance_rationality: v[1],
            diagnostic_logicality: v[2],
            clinical_applicability: v[3],
            treatment_logicality: v[4],
            rubric: RUBRIC_VERSION.into(),
        }
    }
}

/// Scores one transcript against the rule of the case's disease.
pub fn score_sp(transcript: &SpTranscript, case: &SpCase, rule: &DiagnosticRule) -> SpReport {
    let ev = &rule.evidence;
    let revealed: BTreeSet<&str> = transcript.annotations.iter().flat_map(|a| a.facts_revealed.iter().map(String::as_str)).collect();
    let mut wanted: Vec<String> = ev.key_symptoms.iter().chain(&ev.key_exams).cloned().collect();
    wanted.extend(ev.history_items.iter().map(|c| format!("history:{}", c.label())));
    let elicited = wanted.iter().filter(|w| revealed.contains(w.as_str())).count();
    let completeness = if wanted.is_empty() { 1.0 } else { elicited as f64 / wanted.len() as f64 };

    let mut requested: Vec<&str> = Vec::new();
    for a in &transcript.annotations {
        for e in &a.exams_requested {
            if !requested.contains(&e.as_str()) {
                requested.push(e);
            }
        }
    }
    let guidance = if ev.key_exams.is_empty() {
        if requested.is_empty() { 1.0 } else { 0.0 }
    } else if requested.is_empty() {
        0.0
    } else {
        let hits: Vec<&str> = requested.iter().copied().filter(|e| ev.key_exams.iter().any(|k| k == e)).collect();
        let precision = hits.len() as f64 / requested.len() as f64;
        let prefix = hits.iter().zip(ev.ordered_exams()).take_while(|(a, b)| **a == *b).count();
        precision * prefix as f64 / ev.key_exams.len() as f64
    };

    let last_diag = transcript.annotations.iter().rposition(|a| a.diagnosis);
    let correct = last_diag.is_some_and(|i| transcript.annotations[i].names_target);
    let monotone = StageTagger::default().validate(&transcript.as_dialogue(case), rule).monotone;
    let logic = match (correct, monotone) {
        (true, true) => 1.0,
        (false, false) => 0.0,
        _ => 0.5,
    };
    let physician_turns = transcript.turns.iter().filter(|t| t.role == Role::Physician).count();
    let first_diag = transcript.annotations.iter().position(|a| a.diagnosis);
    let treatment = match first_diag {
        Some(d) => transcript.annotations.iter().enumerate().any(|(i, a)| a.treatment && i >= d),
        None => false,
    };
    SpReport::from_values(
        &transcript.case_id,
        [completeness, guidance, logic, physician_turns as f64, if treatment { 1.0 } else { 0.0 }],
    )
}

/// Per-metric means.
pub fn aggregate(reports: &[SpReport]) -> SpReport {
    let n = reports.len().max(1) as f64;
    let mut sums = [0.0; 5];
    for r in reports {
        for (s, v) in sums.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    SpReport::from_values("aggregate", sums.map(|s| s / n))
}

/// Competition ranks (1 is best, ties share the better rank) of each
/// column; higher values rank better.
pub fn competition_ranks(values: &[f64]) -> Vec<usize> {
    values.iter().map(|v| 1 + values.iter().filter(|o| **o > *v).count()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicianResult {
    pub name: String,
    pub transcripts: Vec<SpTranscript>,
    pub reports: Vec<SpReport>,
    pub aggregate: SpReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryResult {
    pub physicians: Vec<PhysicianResult>,
    /// `ranks[metric][physician]`.
    pub ranks: BTreeMap<String, Vec<usize>>,
}

/// Runs every case against every physician.
pub fn run_sp_battery<S: Scalar, M: SequenceModel<S> + ?Sized>(
    physicians: &[(&str, &M)],
    cases: &[SpCase],
    rules: &RuleSet,
    decode: &DecodeConfig,
) -> Result<BatteryResult, SpError> {
    for c in cases {
        if rules.get(&c.disease.canonical_name).is_none() {
            return Err(SpError::MissingRule(c.disease.canonical_name.clone()));
        }
    }
    let mut results = Vec::new();
    for (name, model) in physicians {
        let transcripts = cases.par_iter().map(|c| run_sp_dialogue(*model, c, decode)).collect::<Result<Vec<_>, _>>()?;
        let reports: Vec<SpReport> = transcripts
            .iter()
            .zip(cases)
            .map(|(t, c)| score_sp(t, c, rules.get(&c.disease.canonical_name).expect("checked")))
            .collect();
        let aggregate = aggregate(&reports);
        results.push(PhysicianResult { name: name.to_string(), transcripts, reports, aggregate });
    }
    let ranks = SpReport::METRICS
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let col: Vec<f64> = results.iter().map(|r| r.aggregate.values()[m]).collect();
            (name.to_string(), competition_ranks(&col))
        })
        .collect();
    Ok(BatteryResult { physicians: results, ranks })
}

/// Console table: one row per metric, one column per physician, scores
/// with ranks in parentheses.
pub struct SpTable<'a>(pub &'a BatteryResult);

impl fmt::Display for SpTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(f, "{:<26}", "SP metric")?;
        for p in &b.physicians {
            write!(f, "{:>16}", p.name)?;
        }
        writeln!(f)?;
        for (m, name) in SpReport::METRICS.iter().enumerate() {
            write!(f, "{name:<26}")?;
            for (i, p) in b.physicians.iter().enumerate() {
                let v = p.aggregate.values()[m];
                let shown = if m == 3 { v } else { 100.0 * v };
                write!(f, "{:>16}", format!("{shown:.2} ({})", b.ranks[*name][i]))?;
            }
            writeln!(f)?;
        }
        write!(f, "rubric: {RUBRIC_VERSION}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::fixtures::TabularPolicy;
    use crate::policy::Tokenizer;
    use crate::text::Scheme;

    fn world() -> RuleWorld {
        RuleWorld::urology()
    }

    fn case() -> SpCase {
        SpCase::from_world(&world(), "kidney stone", "c1", 3, 12).unwrap()
    }

    #[test]
    fn answers_come_from_the_repository() {
        let c = case();
        let r = patient_respond(&c, "what did the ultrasound show ?");
        assert_eq!(r, "the ultrasound showed a small stone in the kidney .");
        assert_eq!(patient_respond(&c, "did you have an x-ray of the knee ?"), HONEST_ABSENCE);
        let both = patient_respond(&c, "any surgery or medication ?");
        let med = &c.history.iter().find(|h| h.category == HistoryCategory::Medication).unwrap().text;
        let surg = &c.history.iter().find(|h| h.category == HistoryCategory::Surgical).unwrap().text;
        assert_eq!(both, format!("{med} {surg}"));
    }

    fn scripted_physician(lines: &[&str], c: &SpCase) -> TabularPolicy<f64> {
        let mut texts: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        texts.extend(c.repository().iter().map(|s| s.to_string()));
        let tok = Tokenizer::build(texts.iter().map(String::as_str), Scheme::Word);
        let mut turns = vec![Turn::patient(c.chief_complaint.clone())];
        let mut examples = Vec::new();
        for l in lines {
            examples.push(crate::corpus::SftExample { context: render_context(&turns), target: l.to_string(), source: None });
            turns.push(Turn::physician(*l));
            turns.push(Turn::patient(patient_respond(c, l)));
        }
        TabularPolicy::copying(tok, 512, &examples)
    }

    #[test]
    fn immediate_diagnosis_ends_after_two_turns() {
        let c = case();
        let p = scripted_physician(&["the diagnosis is kidney stone ."], &c);
        let t = run_sp_dialogue(&p, &c, &DecodeConfig::greedy(16)).unwrap();
        assert_eq!(t.turns.len(), 2);
        assert!(t.terminated_by_diagnosis && !t.truncated);
    }

    #[test]
    fn never_diagnosing_hits_max_turns() {
        let c = SpCase { max_turns: 6, ..case() };
        let p = scripted_physician(&["any fever ?", "any nausea ?", "any chills ?"], &c);
        let t = run_sp_dialogue(&p, &c, &DecodeConfig::greedy(16)).unwrap();
        assert_eq!(t.turns.len(), 6);
        assert!(t.truncated && !t.terminated_by_diagnosis);
        assert!(honesty_violations(&t, &c).is_empty());
    }

    #[test]
    fn full_rule_transcript_scores() {
        let c = case();
        let rule = world().disease("kidney stone").unwrap().rule();
        let p = scripted_physician(
            &[
                "have you noticed any blood in urine ?",
                "what did the ultrasound show ?",
                "and the ct scan ?",
                "do you take any medication ?",
                "the diagnosis is kidney stone .",
            ],
            &c,
        );
        let t = run_sp_dialogue(&p, &c, &DecodeConfig::greedy(16)).unwrap();
        let r = score_sp(&t, &c, &rule);
        assert_eq!(r.information_completeness, 1.0);
        assert_eq!(r.guidance_rationality, 1.0);
        assert_eq!(r.diagnostic_logicality, 1.0);
        assert_eq!(r.clinical_applicability, 5.0);
        assert_eq!(r.treatment_logicality, 0.0);
        assert_eq!(r.rubric, RUBRIC_VERSION);
    }

    #[test]
    fn no_exams_means_no_guidance() {
        let c = case();
        let rule = world().disease("kidney stone").unwrap().rule();
        let p = scripted_physician(&["have you noticed any blood in urine ?", "the diagnosis is renal cyst ."], &c);
        let t = run_sp_dialogue(&p, &c, &DecodeConfig::greedy(16)).unwrap();
        let r = score_sp(&t, &c, &rule);
        assert_eq!(r.guidance_rationality, 0.0);
        assert_eq!(r.diagnostic_logicality, 0.5);
        assert_eq!(r.information_completeness, 2.0 / 5.0);
    }

    #[test]
    fn ranks_share_ties() {
        assert_eq!(competition_ranks(&[0.5, 0.9, 0.5, 0.1]), vec![2, 1, 2, 4]);
        assert_eq!(competition_ranks(&[3.0]), vec![1]);
    }

    #[test]
    fn composition_check() {
        let parts = ["a b .", "c ."];
        assert!(composed_of("a b . c .", &parts));
        assert!(!composed_of("a b . d .", &parts));
        assert!(!composed_of("a b .c .", &parts));
    }
}
