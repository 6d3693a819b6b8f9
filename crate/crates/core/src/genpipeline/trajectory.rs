//! Term-matching stage tagger and rule-compliance checks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Role, Turn};
use crate::rulemodel::{DiagnosticRule, HistoryCategory, Stage};
use crate::text::{term_tokens, Haystack};

/// Words a rewritten patient turn may use beyond the source dialogue and
/// the rule's evidence terms.
pub const ANSWER_WORDS: &[&str] = &[
    "yes", "no", "i", "have", "had", "a", "an", "the", "some", "there", "is", "it", "and", "my", "me", "also",
    "been", "showed", "do", "not", "know", "doctor", "please", "ask", "other", "questions", "of", "for", "what",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTagger {
    /// Word prefixes marking a diagnosis, e.g. `diagnos`.
    pub diagnosis_prefixes: Vec<String>,
    pub diagnosis_phrases: Vec<String>,
    /// Word prefixes marking treatment advice.
    pub treatment_prefixes: Vec<String>,
}

impl Default for StageTagger {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            diagnosis_prefixes: v(&["diagnos"]),
            diagnosis_phrases: v(&["you likely have", "most likely"]),
            treatment_prefixes: v(&["treat", "recommend", "prescri", "therap"]),
        }
    }
}

fn mentions_history(h: &Haystack, cat: HistoryCategory) -> bool {
    cat.keywords().iter().any(|k| h.mentions(k))
}

impl StageTagger {
    pub fn is_diagnosis(&self, text: &str) -> bool {
        let h = Haystack::new(text);
        self.diagnosis_prefixes.iter().any(|p| h.has_word_prefix(p))
            || self.diagnosis_phrases.iter().any(|p| h.mentions(p))
    }

    pub fn is_treatment(&self, text: &str) -> bool {
        let h = Haystack::new(text);
        self.treatment_prefixes.iter().any(|p| h.has_word_prefix(p))
    }

    /// Diagnosis beats exams, exams beat history, history beats symptoms.
    pub fn tag(&self, turn: &Turn, rule: &DiagnosticRule) -> Option<Stage> {
        let h = Haystack::new(&turn.text);
        let ev = &rule.evidence;
        if turn.role == Role::Physician && self.is_diagnosis(&turn.text) {
            Some(Stage::Diagnosis)
        } else if ev.key_exams.iter().any(|e| h.mentions(e)) {
            Some(Stage::ObjectiveExams)
        } else if HistoryCategory::ALL.iter().any(|c| mentions_history(&h, *c)) {
            Some(Stage::MedicalHistory)
        } else if ev.key_symptoms.iter().any(|s| h.mentions(s)) {
            Some(Stage::SubjectiveSymptoms)
        } else {
            None
        }
    }

    pub fn tag_dialogue(&self, d: &mut Dialogue, rule: &DiagnosticRule) {
        for t in &mut d.turns {
            t.stage = self.tag(t, rule);
        }
    }

    pub fn validate(&self, d: &Dialogue, rule: &DiagnosticRule) -> TrajectoryReport {
        let ev = &rule.evidence;
        let hays: Vec<Haystack> = d.turns.iter().map(|t| Haystack::new(&t.text)).collect();
        let mut first = [None; 4];
        for (i, t) in d.turns.iter().enumerate() {
            if let Some(s) = self.tag(t, rule) {
                first[s.index()].get_or_insert(i);
            }
        }
        let present: Vec<usize> = first.iter().flatten().copied().collect();
        let monotone = present.windows(2).all(|w| w[0] <= w[1]);
        let any = |term: &str| hays.iter().any(|h| h.mentions(term));

        let mut exam_firsts: Vec<((usize, usize), &str)> = ev
            .key_exams
            .iter()
            .filter_map(|e| {
                hays.iter().enumerate().find_map(|(i, h)| h.position(e).map(|p| ((i, p), e.as_str())))
            })
            .collect();
        exam_firsts.sort();
        let order = ev.ordered_exams();
        let exam_order_prefix = exam_firsts.iter().zip(&order).take_while(|((_, e), o)| e == *o).count();

        let last = d.turns.last();
        let ends_with_diagnosis =
            last.is_some_and(|t| t.role == Role::Physician && self.tag(t, rule) == Some(Stage::Diagnosis));
        let names_disease = last.is_some_and(|t| Haystack::new(&t.text).mentions(rule.name()));
        let treatment_turns = d
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::Physician && self.is_treatment(&t.text))
            .map(|(i, _)| i)
            .collect();
        TrajectoryReport {
            first_occurrence: first,
            monotone,
            symptoms_covered: ev.key_symptoms.iter().filter(|s| any(s)).count(),
            symptoms_total: ev.key_symptoms.len(),
            exams_covered: exam_firsts.len(),
            exams_total: ev.key_exams.len(),
            history_covered: ev
                .history_items
                .iter()
                .filter(|c| hays.iter().any(|h| mentions_history(h, **c)))
                .count(),
            history_total: ev.history_items.len(),
            exam_order_prefix,
            ends_with_diagnosis,
            names_disease,
            treatment_turns,
        }
    }

    /// What the physician should address next given the turns so far.
    pub fn next_pending(&self, turns: &[Turn], rule: &DiagnosticRule) -> Pending {
        let hays: Vec<Haystack> = turns.iter().map(|t| Haystack::new(&t.text)).collect();
        let ev = &rule.evidence;
        let symptoms: Vec<String> =
            ev.key_symptoms.iter().filter(|s| !hays.iter().any(|h| h.mentions(s))).cloned().collect();
        if !symptoms.is_empty() {
            return Pending::Symptoms(symptoms);
        }
        if let Some(e) = ev.ordered_exams().into_iter().find(|e| !hays.iter().any(|h| h.mentions(e))) {
            return Pending::Exam(e.to_string());
        }
        let hist: Vec<HistoryCategory> = ev
            .history_items
            .iter()
            .copied()
            .filter(|c| !hays.iter().any(|h| mentions_history(h, *c)))
            .collect();
        if !hist.is_empty() {
            return Pending::History(hist);
        }
        Pending::Diagnosis
    }

    /// Whether a physician turn following `context` addresses the next
    /// pending item of the rule, and nothing later.
    pub fn turn_complies(&self, context: &[Turn], generated: &str, rule: &DiagnosticRule) -> bool {
        let h = Haystack::new(generated);
        let diag = self.is_diagnosis(generated);
        let any_exam = rule.evidence.key_exams.iter().any(|e| h.mentions(e));
        match self.next_pending(context, rule) {
            Pending::Symptoms(s) => !diag && !any_exam && s.iter().any(|t| h.mentions(t)),
            Pending::Exam(e) => !diag && h.mentions(&e),
            Pending::History(c) => !diag && !any_exam && c.iter().any(|c| mentions_history(&h, *c)),
            Pending::Diagnosis => diag && h.mentions(rule.name()) && !self.is_treatment(generated),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pending {
    Symptoms(Vec<String>),
    Exam(String),
    History(Vec<HistoryCategory>),
    Diagnosis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    /// Turn index where each stage first appears, in trajectory order.
    pub first_occurrence: [Option<usize>; 4],
    pub monotone: bool,
    pub symptoms_covered: usize,
    pub symptoms_total: usize,
    pub exams_covered: usize,
    pub exams_total: usize,
    pub history_covered: usize,
    pub history_total: usize,
    /// Longest prefix of the exam priority order matched by first mentions.
    pub exam_order_prefix: usize,
    pub ends_with_diagnosis: bool,
    pub names_disease: bool,
    pub treatment_turns: Vec<usize>,
}

impl TrajectoryReport {
    pub fn first(&self, stage: Stage) -> Option<usize> {
        self.first_occurrence[stage.index()]
    }

    pub fn passes(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.monotone {
            out.push("stages out of order");
        }
        if self.symptoms_covered < self.symptoms_total {
            out.push("key symptoms missing");
        }
        if self.exams_covered < self.exams_total {
            out.push("key exams missing");
        }
        if self.exam_order_prefix < self.exams_total {
            out.push("exam priority order broken");
        }
        if self.history_covered < self.history_total {
            out.push("history items missing");
        }
        if !self.ends_with_diagnosis {
            out.push("does not end with a diagnosis");
        }
        if !self.names_disease {
            out.push("diagnosis does not name the disease");
        }
        if !self.treatment_turns.is_empty() {
            out.push("contains treatment advice");
        }
        out
    }
}

pub fn validate_trajectory(d: &Dialogue, rule: &DiagnosticRule) -> TrajectoryReport {
    StageTagger::default().validate(d, rule)
}

/// Patient-turn words in `output` that come from neither `source`, the
/// rule's evidence terms nor the closed answer vocabulary.
pub fn unsupported_patient_words(output: &Dialogue, source: &Dialogue, rule: &DiagnosticRule) -> Vec<(usize, String)> {
    let mut known: BTreeSet<String> = ANSWER_WORDS.iter().map(|s| s.to_string()).collect();
    for t in &source.turns {
        known.extend(term_tokens(&t.text));
    }
    let ev = &rule.evidence;
    for term in ev.key_symptoms.iter().chain(&ev.key_exams) {
        known.extend(term_tokens(term));
    }
    for c in &ev.history_items {
        for k in c.keywords() {
            known.extend(term_tokens(k));
        }
    }
    let mut out = Vec::new();
    for (i, t) in output.turns.iter().enumerate().filter(|(_, t)| t.role == Role::Patient) {
        for w in term_tokens(&t.text) {
            if !known.contains(&w) {
                out.push((i, w));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rulemodel::DiseaseId;

    fn rule() -> DiagnosticRule {
        DiagnosticRule::new(
            "kidney stone",
            "N20",
            &["flank pain", "blood in urine"],
            &["ultrasound", "ct scan", "urinalysis"],
            &[HistoryCategory::Medication],
        )
    }

    fn dlg(turns: &[(&str, &str)]) -> Dialogue {
        Dialogue {
            id: "t".into(),
            disease: DiseaseId::new("kidney stone", "N20"),
            turns: turns
                .iter()
                .map(|(r, t)| if *r == "p" { Turn::patient(*t) } else { Turn::physician(*t) })
                .collect(),
            provenance: Default::default(),
        }
    }

    #[test]
    fn compliant_dialogue() {
        let d = dlg(&[
            ("p", "i have flank pain"),
            ("d", "any blood in urine ?"),
            ("p", "yes"),
            ("d", "what did the ultrasound show ?"),
            ("p", "the ultrasound showed a stone"),
            ("d", "and the ct scan ?"),
            ("p", "the ct scan showed a stone"),
            ("d", "do you take any medication ?"),
            ("p", "no"),
            ("d", "you likely have kidney stone ."),
        ]);
        let r = validate_trajectory(&d, &rule());
        assert!(r.monotone);
        assert_eq!(r.first_occurrence, [Some(0), Some(3), Some(7), Some(9)]);
        assert_eq!((r.exams_covered, r.exams_total, r.exam_order_prefix), (2, 3, 2));
        assert_eq!(r.failures(), vec!["key exams missing", "exam priority order broken"]);
    }

    #[test]
    fn early_diagnosis_is_not_monotone() {
        let d = dlg(&[
            ("p", "i have flank pain"),
            ("d", "the diagnosis is kidney stone"),
            ("p", "ok"),
            ("d", "get an ultrasound"),
        ]);
        let r = validate_trajectory(&d, &rule());
        assert_eq!(r.first(Stage::Diagnosis), Some(1));
        assert_eq!(r.first(Stage::ObjectiveExams), Some(3));
        assert!(!r.monotone);
        assert!(!r.ends_with_diagnosis);
    }

    #[test]
    fn exam_order_prefix_counts_matches() {
        let d = dlg(&[("p", "flank pain"), ("d", "ct scan and ultrasound please"), ("p", "ok"), ("d", "diagnosis: kidney stone")]);
        assert_eq!(validate_trajectory(&d, &rule()).exam_order_prefix, 0);
    }

    #[test]
    fn pending_items_follow_the_rule() {
        let t = StageTagger::default();
        let r = rule();
        let ctx = dlg(&[("p", "i have flank pain")]).turns;
        assert!(t.turn_complies(&ctx, "any blood in urine ?", &r));
        assert!(!t.turn_complies(&ctx, "please get an ultrasound", &r));
        let ctx = dlg(&[("p", "flank pain"), ("d", "blood in urine ?"), ("p", "yes")]).turns;
        assert!(t.turn_complies(&ctx, "please get an ultrasound", &r));
        assert!(!t.turn_complies(&ctx, "please get a ct scan", &r));
        assert!(!t.turn_complies(&ctx, "you likely have kidney stone", &r));
        let ctx = dlg(&[
            ("p", "flank pain"), ("d", "blood in urine ?"), ("p", "yes"),
            ("d", "ultrasound ?"), ("p", "ok"), ("d", "ct scan ?"), ("p", "ok"),
            ("d", "urinalysis ?"), ("p", "ok"), ("d", "any medication ?"), ("p", "no"),
        ])
        .turns;
        assert!(t.turn_complies(&ctx, "you likely have kidney stone .", &r));
        assert!(!t.turn_complies(&ctx, "you likely have kidney stone , i recommend rest", &r));
    }

    #[test]
    fn honesty_flags_new_words() {
        let src = dlg(&[("p", "flank pain"), ("d", "diagnosis kidney stone")]);
        let out = dlg(&[("p", "yes , i have flank pain and a headache"), ("d", "diagnosis kidney stone")]);
        assert_eq!(unsupported_patient_words(&out, &src, &rule()), vec![(0, "headache".to_string())]);
    }
}
