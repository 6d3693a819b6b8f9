//! Dialogue corpus: schemas, bounds validation, SFT example extraction,
//! statistics and stratified splitting.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::derive_seed;
use crate::rulemodel::{DiseaseId, Stage};
use crate::text::Scheme;

pub const PATIENT_LABEL: &str = "Patient:";
pub const PHYSICIAN_LABEL: &str = "Doctor:";

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Patient,
    Physician,
}

impl Role {
    pub fn label(&self) -> &'static str {
        match self {
            Role::Patient => PATIENT_LABEL,
            Role::Physician => PHYSICIAN_LABEL,
        }
    }

    pub fn other(&self) -> Role {
        match self {
            Role::Patient => Role::Physician,
            Role::Physician => Role::Patient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

impl Turn {
    pub fn patient(text: impl Into<String>) -> Self {
        Self { role: Role::Patient, text: text.into(), stage: None }
    }

    pub fn physician(text: impl Into<String>) -> Self {
        Self { role: Role::Physician, text: text.into(), stage: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub backend: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub disease: DiseaseId,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Dialogue {
    pub fn physician_turn_indices(&self) -> Vec<usize> {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::Physician)
            .map(|(i, _)| i)
            .collect()
    }

    /// Patient first, strictly alternating, physician last.
    pub fn is_well_formed(&self) -> bool {
        !self.turns.is_empty()
            && self.turns[0].role == Role::Patient
            && self.turns.last().map(|t| t.role) == Some(Role::Physician)
            && self.turns.windows(2).all(|w| w[0].role != w[1].role)
    }
}

/// History rendered with role prefixes, one turn per line, ending with the
/// physician cue.
pub fn render_context(turns: &[Turn]) -> String {
    let mut out = String::new();
    for t in turns {
        out.push_str(t.role.label());
        out.push(' ');
        out.push_str(&t.text);
        out.push('\n');
    }
    out.push_str(PHYSICIAN_LABEL);
    out
}

/// Transcript form without a trailing cue, as shown to a chat backend.
pub fn render_transcript(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{} {}", t.role.label(), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExampleSource {
    pub dialogue_id: String,
    pub turn_index: usize,
}

/// `(x, y)`: dialogue history up to a physician turn and that turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub context: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ExampleSource>,
}

/// One example per physician turn, with all earlier turns as history.
pub fn explode_dialogue(d: &Dialogue) -> Vec<SftExample> {
    d.turns
        .iter()
        .enumerate()
        .filter(|(i, t)| t.role == Role::Physician && *i > 0)
        .map(|(i, t)| SftExample {
            context: render_context(&d.turns[..i]),
            target: t.text.clone(),
            source: Some(ExampleSource { dialogue_id: d.id.clone(), turn_index: i }),
        })
        .collect()
}

pub fn explode_corpus(dialogues: &[Dialogue]) -> Vec<SftExample> {
    dialogues.iter().flat_map(explode_dialogue).collect()
}

/// Validator bounds; defaults follow the reference corpus (3–13 rounds per
/// dialogue, 3–200 tokens per round). A round is one turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueBounds {
    pub min_rounds: usize,
    pub max_rounds: usize,
    pub min_round_tokens: usize,
    pub max_round_tokens: usize,
}

impl Default for DialogueBounds {
    fn default() -> Self {
        Self { min_rounds: 3, max_rounds: 13, min_round_tokens: 3, max_round_tokens: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundViolation {
    NotAlternating,
    EmptyTurn { turn: usize },
    RoundCount { rounds: usize },
    RoundLength { turn: usize, tokens: usize },
}

impl fmt::Display for BoundViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundViolation::NotAlternating => write!(f, "turns do not alternate patient/physician"),
            BoundViolation::EmptyTurn { turn } => write!(f, "turn {turn} is empty"),
            BoundViolation::RoundCount { rounds } => write!(f, "{rounds} rounds outside bounds"),
            BoundViolation::RoundLength { turn, tokens } => {
                write!(f, "turn {turn} has {tokens} tokens, outside bounds")
            }
        }
    }
}

pub fn validate_dialogue(d: &Dialogue, bounds: &DialogueBounds, scheme: Scheme) -> Vec<BoundViolation> {
    let mut out = Vec::new();
    if !d.is_well_formed() {
        out.push(BoundViolation::NotAlternating);
    }
    let rounds = d.turns.len();
    if rounds < bounds.min_rounds || rounds > bounds.max_rounds {
        out.push(BoundViolation::RoundCount { rounds });
    }
    for (i, t) in d.turns.iter().enumerate() {
        if t.text.trim().is_empty() {
            out.push(BoundViolation::EmptyTurn { turn: i });
            continue;
        }
        let tokens = scheme.count(&t.text);
        if tokens < bounds.min_round_tokens || tokens > bounds.max_round_tokens {
            out.push(BoundViolation::RoundLength { turn: i, tokens });
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    /// All turns.
    pub rounds: usize,
    pub physician_rounds: usize,
    pub min_rounds: usize,
    pub max_rounds: usize,
    pub min_round_tokens: usize,
    pub max_round_tokens: usize,
    pub per_disease: BTreeMap<String, usize>,
}

pub fn compute_stats(dialogues: &[Dialogue], scheme: Scheme) -> CorpusStats {
    if dialogues.is_empty() {
        return CorpusStats::default();
    }
    let mut s = CorpusStats {
        min_rounds: usize::MAX,
        min_round_tokens: usize::MAX,
        ..Default::default()
    };
    for d in dialogues {
        s.dialogues += 1;
        s.rounds += d.turns.len();
        s.min_rounds = s.min_rounds.min(d.turns.len());
        s.max_rounds = s.max_rounds.max(d.turns.len());
        *s.per_disease.entry(d.disease.canonical_name.clone()).or_default() += 1;
        for t in &d.turns {
            if t.role == Role::Physician {
                s.physician_rounds += 1;
            }
            let n = scheme.count(&t.text);
            s.min_round_tokens = s.min_round_tokens.min(n);
            s.max_round_tokens = s.max_round_tokens.max(n);
        }
    }
    if s.rounds == 0 {
        s.min_round_tokens = 0;
    }
    s
}

/// Raised for a disease that cannot be stratified; its dialogue stays in
/// the training split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateSplit {
    pub disease: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub warnings: Vec<DegenerateSplit>,
}

/// Disease-stratified split. Per-disease test counts follow the largest
/// remainder method, so each disease sits within one dialogue of its
/// proportional share and every disease with two or more dialogues keeps at
/// least one in train. The result does not depend on input order.
pub fn split_corpus(dialogues: &[Dialogue], test_fraction: f64, seed: u64) -> Result<Split, CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(test_fraction));
    }
    let mut groups: BTreeMap<&str, Vec<&Dialogue>> = BTreeMap::new();
    for d in dialogues {
        groups.entry(d.disease.canonical_name.as_str()).or_default().push(d);
    }
    let mut warnings = Vec::new();
    let mut quotas: BTreeMap<&str, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    for (&name, members) in &groups {
        let n = members.len();
        if n < 2 {
            log::warn!("disease {name:?} has a single dialogue; kept in train");
            warnings.push(DegenerateSplit { disease: name.to_string() });
            quotas.insert(name, 0);
            continue;
        }
        let share = n as f64 * test_fraction;
        let base = (share.floor() as usize).min(n - 1);
        quotas.insert(name, base);
        remainders.push((share - base as f64, name, n));
    }
    let target = (dialogues.len() as f64 * test_fraction).round() as usize;
    let mut assigned: usize = quotas.values().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    for (frac, name, n) in remainders {
        if assigned >= target {
            break;
        }
        let q = quotas.get_mut(name).expect("quota exists");
        if frac > 0.0 && *q + 1 < n {
            *q += 1;
            assigned += 1;
        }
    }

    let mut split = Split { warnings, ..Default::default() };
    for (name, mut members) in groups {
        members.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["split", name]));
        members.shuffle(&mut rng);
        let q = quotas[name];
        split.test.extend(members[..q].iter().map(|d| (*d).clone()));
        split.train.extend(members[q..].iter().map(|d| (*d).clone()));
    }
    split.train.sort_by(|a, b| a.id.cmp(&b.id));
    split.test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(split)
}

/// Reproducibility record written next to a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub source: String,
    pub backend: String,
    pub seed: u64,
    pub config_hash: String,
    pub template_hashes: BTreeMap<String, String>,
    pub bounds: DialogueBounds,
    pub scheme: Scheme,
    pub dialogues: usize,
    pub quarantined: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn dialogue(id: &str, disease: &str, n_turns: usize) -> Dialogue {
        let turns = (0..n_turns)
            .map(|i| {
                if i % 2 == 0 {
                    Turn::patient(format!("patient says thing {i}"))
                } else {
                    Turn::physician(format!("doctor asks thing {i}"))
                }
            })
            .collect();
        Dialogue {
            id: id.into(),
            disease: DiseaseId::new(disease, &disease.to_uppercase()),
            turns,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn explode_counts_physician_turns() {
        let d = dialogue("a", "x", 6);
        let ex = explode_dialogue(&d);
        assert_eq!(ex.len(), 3);
        for (e, idx) in ex.iter().zip([1, 3, 5]) {
            assert_eq!(e.source.as_ref().unwrap().turn_index, idx);
            assert!(e.context.ends_with(PHYSICIAN_LABEL));
        }
        // Each context + target is a prefix of the next context.
        for w in ex.windows(2) {
            let full = format!("{} {}", w[0].context, w[0].target);
            assert!(w[1].context.starts_with(&full));
        }
        let two = explode_dialogue(&dialogue("b", "x", 2));
        assert_eq!(two.len(), 1);
        assert_eq!(two[0].context, "Patient: patient says thing 0\nDoctor:");
    }

    #[test]
    fn stats_of_empty_and_single() {
        assert_eq!(compute_stats(&[], Scheme::Word), CorpusStats::default());
        let s = compute_stats(&[dialogue("a", "x", 5)], Scheme::Word);
        assert_eq!((s.dialogues, s.rounds, s.min_rounds, s.max_rounds), (1, 5, 5, 5));
        assert_eq!(s.physician_rounds, 2);
        assert_eq!(s.per_disease["x"], 1);
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let ds: Vec<_> = (0..100)
            .map(|i| dialogue(&format!("d{i:03}"), &format!("dis{}", i % 10), 4))
            .collect();
        let a = split_corpus(&ds, 0.1, 7).unwrap();
        let b = split_corpus(&ds, 0.1, 7).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (90, 10));
        assert_eq!(a, b);
        let mut rev = ds.clone();
        rev.reverse();
        assert_eq!(split_corpus(&rev, 0.1, 7).unwrap(), a);
        assert_eq!(split_corpus(&ds, 0.0, 7), Err(CorpusError::InvalidFraction(0.0)));
        assert!(split_corpus(&ds, 1.0, 7).is_err());
    }

    #[test]
    fn singleton_disease_warns_and_stays_in_train() {
        let mut ds: Vec<_> = (0..10).map(|i| dialogue(&format!("d{i}"), "common", 4)).collect();
        ds.push(dialogue("lonely", "rare", 4));
        let s = split_corpus(&ds, 0.2, 1).unwrap();
        assert_eq!(s.warnings, vec![DegenerateSplit { disease: "rare".into() }]);
        assert!(s.train.iter().any(|d| d.id == "lonely"));
    }

    #[test]
    fn bounds_validation() {
        let b = DialogueBounds::default();
        assert!(validate_dialogue(&dialogue("a", "x", 4), &b, Scheme::Word).is_empty());
        let short = dialogue("a", "x", 2);
        assert_eq!(validate_dialogue(&short, &b, Scheme::Word), vec![BoundViolation::RoundCount { rounds: 2 }]);
        let mut d = dialogue("a", "x", 4);
        d.turns[1].text = "ok".into();
        assert_eq!(
            validate_dialogue(&d, &b, Scheme::Word),
            vec![BoundViolation::RoundLength { turn: 1, tokens: 1 }]
        );
        d.turns.swap(0, 1);
        assert!(validate_dialogue(&d, &b, Scheme::Word).contains(&BoundViolation::NotAlternating));
    }
}
