//! Diagnostic rules: inquiry trajectory plus the essential evidence a
//! physician must collect for one disease.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::{Template, TemplateError};
use crate::text::normalize_name;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("disease name {0:?} has no canonical mapping")]
    UnmappedDisease(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("rule set is invalid: {0}")]
    Invalid(ValidationReport),
    #[error("alias {alias:?} targets unknown disease {target:?}")]
    DanglingAlias { alias: String, target: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiseaseId {
    pub canonical_name: String,
    pub category_code: String,
}

impl DiseaseId {
    pub fn new(name: &str, code: &str) -> Self {
        Self { canonical_name: name.to_string(), category_code: code.to_string() }
    }
}

impl fmt::Display for DiseaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SubjectiveSymptoms,
    ObjectiveExams,
    MedicalHistory,
    Diagnosis,
}

impl Stage {
    pub const ALL: [Stage; 4] =
        [Stage::SubjectiveSymptoms, Stage::ObjectiveExams, Stage::MedicalHistory, Stage::Diagnosis];

    pub fn description(&self) -> &'static str {
        match self {
            Stage::SubjectiveSymptoms => "ask about the patient's subjective symptoms",
            Stage::ObjectiveExams => "collect objective examination results",
            Stage::MedicalHistory => "ask about relevant medical history",
            Stage::Diagnosis => "state the final diagnosis",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

/// The mandated inquiry order: symptoms, exams, history, diagnosis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    stages: [Stage; 4],
}

impl Default for Trajectory {
    fn default() -> Self {
        Self { stages: Stage::ALL }
    }
}

impl Trajectory {
    pub fn stages(&self) -> &[Stage; 4] {
        &self.stages
    }
}

impl TryFrom<Vec<Stage>> for Trajectory {
    type Error = RuleError;

    fn try_from(stages: Vec<Stage>) -> Result<Self, RuleError> {
        if stages.as_slice() != Stage::ALL {
            return Err(RuleError::InvalidTrajectory(format!(
                "expected symptoms -> exams -> history -> diagnosis, got {stages:?}"
            )));
        }
        Ok(Self::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryCategory {
    Medication,
    Surgical,
    PastMedical,
    Reproductive,
}

impl HistoryCategory {
    pub const ALL: [HistoryCategory; 4] = [
        HistoryCategory::Medication,
        HistoryCategory::Surgical,
        HistoryCategory::PastMedical,
        HistoryCategory::Reproductive,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            HistoryCategory::Medication => "medication history",
            HistoryCategory::Surgical => "surgical history",
            HistoryCategory::PastMedical => "past medical history",
            HistoryCategory::Reproductive => "reproductive history",
        }
    }

    /// Words whose mention marks a turn as being about this history category.
    pub fn keywords(&self) -> &'static [&'static str] {
        match self {
            HistoryCategory::Medication => &["medication", "medications", "medicine", "drug", "drugs"],
            HistoryCategory::Surgical => &["surgery", "surgical", "operation", "operations"],
            HistoryCategory::PastMedical => &["medical history", "chronic illness", "past illness"],
            HistoryCategory::Reproductive => &["reproductive", "children", "childbirth", "pregnancy"],
        }
    }
}

/// Key symptoms, key exams with their priority ranks, and history categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub key_symptoms: Vec<String>,
    pub key_exams: Vec<String>,
    /// `exam_order[i]` is the 1-based priority rank of `key_exams[i]`.
    pub exam_order: Vec<usize>,
    pub history_items: Vec<HistoryCategory>,
}

impl EvidenceSet {
    pub fn exam_order_is_valid(&self) -> bool {
        if self.exam_order.len() != self.key_exams.len() {
            return false;
        }
        let ranks: BTreeSet<usize> = self.exam_order.iter().copied().collect();
        ranks.len() == self.key_exams.len()
            && ranks.iter().copied().eq(1..=self.key_exams.len())
    }

    /// Key exams sorted by priority rank. Falls back to listing order when
    /// the rank list is malformed.
    pub fn ordered_exams(&self) -> Vec<&str> {
        if !self.exam_order_is_valid() {
            return self.key_exams.iter().map(String::as_str).collect();
        }
        let mut idx: Vec<usize> = (0..self.key_exams.len()).collect();
        idx.sort_by_key(|&i| self.exam_order[i]);
        idx.into_iter().map(|i| self.key_exams[i].as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagnosticRule {
    pub disease: DiseaseId,
    pub trajectory: Trajectory,
    pub evidence: EvidenceSet,
}

impl DiagnosticRule {
    pub fn new(
        name: &str,
        code: &str,
        symptoms: &[&str],
        exams_by_priority: &[&str],
        history: &[HistoryCategory],
    ) -> Self {
        Self {
            disease: DiseaseId::new(name, code),
            trajectory: Trajectory::default(),
            evidence: EvidenceSet {
                key_symptoms: symptoms.iter().map(|s| s.to_string()).collect(),
                key_exams: exams_by_priority.iter().map(|s| s.to_string()).collect(),
                exam_order: (1..=exams_by_priority.len()).collect(),
                history_items: history.to_vec(),
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.disease.canonical_name
    }

    pub fn to_record(&self) -> RuleRecord {
        RuleRecord {
            disease: self.disease.canonical_name.clone(),
            code: Some(self.disease.category_code.clone()),
            symptoms: self.evidence.key_symptoms.clone(),
            exams: self.evidence.key_exams.clone(),
            exam_order: self.evidence.exam_order.clone(),
            history: self.evidence.history_items.clone(),
        }
    }
}

/// On-disk form of a rule, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRecord {
    pub disease: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    pub symptoms: Vec<String>,
    pub exams: Vec<String>,
    pub exam_order: Vec<usize>,
    #[serde(default)]
    pub history: Vec<HistoryCategory>,
}

impl From<RuleRecord> for DiagnosticRule {
    fn from(r: RuleRecord) -> Self {
        let code = r.code.unwrap_or_else(|| {
            normalize_name(&r.disease).replace(' ', "_").to_uppercase()
        });
        Self {
            disease: DiseaseId { canonical_name: r.disease, category_code: code },
            trajectory: Trajectory::default(),
            evidence: EvidenceSet {
                key_symptoms: r.symptoms,
                key_exams: r.exams,
                exam_order: r.exam_order,
                history_items: r.history,
            },
        }
    }
}

pub fn read_rules(path: &Path) -> Result<Vec<DiagnosticRule>, RuleError> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| RuleError::Io { path: p.clone(), source })?;
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RuleRecord = serde_json::from_str(line).map_err(|e| RuleError::Parse {
            path: p.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rules.push(rec.into());
    }
    Ok(rules)
}

pub fn write_rules(path: &Path, rules: &[DiagnosticRule]) -> Result<(), RuleError> {
    let mut out = String::new();
    for r in rules {
        out.push_str(&serde_json::to_string(&r.to_record()).expect("rule serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| RuleError::Io { path: path.display().to_string(), source })
}

/// Bindings available to a rule template.
pub const RULE_FIELDS: [&str; 5] = ["DISEASE", "TRAJECTORY", "SYMPTOMS", "EXAMS", "HISTORY"];

/// Renders `T(τ, K)`: the rule's trajectory and evidence spelled out through
/// a template. Exams appear in priority order.
pub fn render_rule_template(rule: &DiagnosticRule, template: &Template) -> Result<String, RuleError> {
    let ev = &rule.evidence;
    let trajectory = rule
        .trajectory
        .stages()
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.description()))
        .collect::<Vec<_>>()
        .join("\n");
    let history = if ev.history_items.is_empty() {
        "none".to_string()
    } else {
        ev.history_items.iter().map(|h| h.label()).collect::<Vec<_>>().join(", ")
    };
    let mut b = BTreeMap::new();
    b.insert("DISEASE", rule.disease.canonical_name.clone());
    b.insert("TRAJECTORY", trajectory);
    b.insert("SYMPTOMS", ev.key_symptoms.join(", "));
    b.insert("EXAMS", ev.ordered_exams().join(" -> "));
    b.insert("HISTORY", history);
    Ok(template.render(&b)?)
}

/// Raw clinical phrasing to canonical disease. Keys are stored normalized;
/// every canonical name maps to itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiseaseNameMap {
    entries: BTreeMap<String, DiseaseId>,
}

impl DiseaseNameMap {
    /// Builds the map from a rule set plus `(raw, canonical)` aliases.
    pub fn new<'a>(
        rules: &[DiagnosticRule],
        aliases: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, RuleError> {
        let by_name: BTreeMap<String, &DiseaseId> =
            rules.iter().map(|r| (normalize_name(r.name()), &r.disease)).collect();
        let mut entries: BTreeMap<String, DiseaseId> =
            by_name.iter().map(|(k, v)| (k.clone(), (*v).clone())).collect();
        for (raw, target) in aliases {
            let id = by_name.get(&normalize_name(target)).ok_or_else(|| RuleError::DanglingAlias {
                alias: raw.to_string(),
                target: target.to_string(),
            })?;
            entries.insert(normalize_name(raw), (*id).clone());
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn aliases(&self) -> impl Iterator<Item = (&str, &DiseaseId)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Alias file: a JSON object from raw phrasing to canonical name.
    pub fn read(path: &Path, rules: &[DiagnosticRule]) -> Result<Self, RuleError> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| RuleError::Io { path: p.clone(), source })?;
        let raw: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| RuleError::Parse { path: p, line: e.line(), message: e.to_string() })?;
        Self::new(rules, raw.iter().map(|(a, b)| (a.as_str(), b.as_str())))
    }

    pub fn write(&self, path: &Path) -> Result<(), RuleError> {
        let raw: BTreeMap<&str, &str> =
            self.entries.iter().map(|(k, v)| (k.as_str(), v.canonical_name.as_str())).collect();
        let text = serde_json::to_string_pretty(&raw).expect("map serializes") + "\n";
        fs::write(path, text).map_err(|source| RuleError::Io { path: path.display().to_string(), source })
    }
}

pub fn map_disease_name(raw: &str, map: &DiseaseNameMap) -> Result<DiseaseId, RuleError> {
    map.entries
        .get(&normalize_name(raw))
        .cloned()
        .ok_or_else(|| RuleError::UnmappedDisease(raw.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    EmptyDiseaseName { index: usize },
    DuplicateDisease { disease: String },
    DuplicateCode { code: String },
    EmptyEvidence { disease: String, list: String },
    DuplicateTerm { disease: String, term: String },
    MalformedExamOrder { disease: String, exams: usize, order: Vec<usize> },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rules: usize,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} rules, {} findings", self.rules, self.findings.len())?;
        for finding in &self.findings {
            write!(f, "; {finding:?}")?;
        }
        Ok(())
    }
}

/// Checks a rule set for duplicate diseases or codes, empty symptom/exam
/// lists, repeated terms and malformed exam orders. History may be empty.
pub fn validate_rule_set(rules: &[DiagnosticRule]) -> ValidationReport {
    let mut findings = Vec::new();
    let mut names = BTreeSet::new();
    let mut codes = BTreeSet::new();
    for (i, rule) in rules.iter().enumerate() {
        let name = normalize_name(rule.name());
        if name.is_empty() {
            findings.push(Finding::EmptyDiseaseName { index: i });
        } else if !names.insert(name) {
            findings.push(Finding::DuplicateDisease { disease: rule.name().to_string() });
        }
        if !codes.insert(rule.disease.category_code.clone()) {
            findings.push(Finding::DuplicateCode { code: rule.disease.category_code.clone() });
        }
        let ev = &rule.evidence;
        for (list, terms) in [("symptoms", &ev.key_symptoms), ("exams", &ev.key_exams)] {
            if terms.is_empty() {
                findings.push(Finding::EmptyEvidence { disease: rule.name().into(), list: list.into() });
            }
            let mut seen = BTreeSet::new();
            for t in terms {
                if !seen.insert(normalize_name(t)) {
                    findings.push(Finding::DuplicateTerm { disease: rule.name().into(), term: t.clone() });
                }
            }
        }
        let mut seen = BTreeSet::new();
        for h in &ev.history_items {
            if !seen.insert(*h) {
                findings.push(Finding::DuplicateTerm { disease: rule.name().into(), term: h.label().into() });
            }
        }
        if !ev.exam_order_is_valid() {
            findings.push(Finding::MalformedExamOrder {
                disease: rule.name().into(),
                exams: ev.key_exams.len(),
                order: ev.exam_order.clone(),
            });
        }
    }
    ValidationReport { rules: rules.len(), findings }
}

/// A validated rule set with lookup by canonical name.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<DiagnosticRule>,
    index: BTreeMap<String, usize>,
}

impl RuleSet {
    pub fn new(rules: Vec<DiagnosticRule>) -> Result<Self, RuleError> {
        let report = validate_rule_set(&rules);
        if !report.is_valid() {
            return Err(RuleError::Invalid(report));
        }
        let index = rules.iter().enumerate().map(|(i, r)| (normalize_name(r.name()), i)).collect();
        Ok(Self { rules, index })
    }

    pub fn rules(&self) -> &[DiagnosticRule] {
        &self.rules
    }

    pub fn get(&self, disease: &str) -> Option<&DiagnosticRule> {
        self.index.get(&normalize_name(disease)).map(|&i| &self.rules[i])
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::defaults;

    fn hydronephrosis() -> DiagnosticRule {
        DiagnosticRule::new(
            "renal hydronephrosis",
            "RH",
            &["flank pain", "nausea"],
            &["urinary ultrasound", "renal ct"],
            &[HistoryCategory::PastMedical],
        )
    }

    #[test]
    fn exam_order_is_preserved_in_prompt() {
        let mut rule = hydronephrosis();
        rule.evidence.key_exams = vec!["ultrasound".into(), "CT".into()];
        rule.evidence.exam_order = vec![1, 2];
        let t = Template::parse(defaults::RULE).unwrap();
        let text = render_rule_template(&rule, &t).unwrap();
        assert!(text.find("ultrasound").unwrap() < text.find("CT").unwrap());

        rule.evidence.exam_order = vec![2, 1];
        let text = render_rule_template(&rule, &t).unwrap();
        assert!(text.find("CT").unwrap() < text.find("ultrasound").unwrap());
    }

    #[test]
    fn empty_template_renders_empty() {
        let t = Template::parse("").unwrap();
        assert_eq!(render_rule_template(&hydronephrosis(), &t).unwrap(), "");
    }

    #[test]
    fn bladder_cancer_prompt_names_its_symptoms() {
        let rule = DiagnosticRule::new(
            "bladder cancer",
            "BC",
            &["painless hematuria", "fever", "difficulty urinating"],
            &["cystoscopy", "urine cytology"],
            &[HistoryCategory::PastMedical],
        );
        let text = render_rule_template(&rule, &Template::parse(defaults::RULE).unwrap()).unwrap();
        assert!(text.contains("fever"));
        assert!(text.contains("difficulty urinating"));
        for s in Stage::ALL {
            assert!(text.contains(s.description()));
        }
        assert!(text.contains("past medical history"));
        assert!(!text.contains("{{"));
    }

    #[test]
    fn unknown_rule_field_is_unresolved() {
        let t = Template::parse("{{DISEASE}} {{TREATMENT}}").unwrap();
        assert!(matches!(
            render_rule_template(&hydronephrosis(), &t),
            Err(RuleError::Template(TemplateError::UnresolvedPlaceholder(n))) if n == "TREATMENT"
        ));
    }

    #[test]
    fn disease_names_map_to_canonical_categories() {
        let rules = vec![hydronephrosis()];
        let map = DiseaseNameMap::new(&rules, [("right renal hydronephrosis", "renal hydronephrosis")]).unwrap();
        let id = map_disease_name("right renal hydronephrosis", &map).unwrap();
        assert_eq!(id.canonical_name, "renal hydronephrosis");
        assert_eq!(map_disease_name("  Renal   HYDRONEPHROSIS", &map).unwrap(), id);
        assert_eq!(map_disease_name(&id.canonical_name, &map).unwrap(), id);
        assert!(matches!(
            map_disease_name("left elbow fracture", &map),
            Err(RuleError::UnmappedDisease(raw)) if raw == "left elbow fracture"
        ));
        assert!(DiseaseNameMap::new(&rules, [("x", "not a disease")]).is_err());
    }

    #[test]
    fn validation_findings() {
        let rules: Vec<_> = (0..32)
            .map(|i| {
                DiagnosticRule::new(
                    &format!("disease {i}"),
                    &format!("D{i:02}"),
                    &["pain"],
                    &["ultrasound", "ct"],
                    &[],
                )
            })
            .collect();
        assert!(validate_rule_set(&rules).is_valid());

        let dup = vec![hydronephrosis(), {
            let mut r = hydronephrosis();
            r.disease.category_code = "RH2".into();
            r
        }];
        let rep = validate_rule_set(&dup);
        assert_eq!(rep.findings, vec![Finding::DuplicateDisease { disease: "renal hydronephrosis".into() }]);

        let mut bad = hydronephrosis();
        bad.evidence.exam_order = vec![1];
        let rep = validate_rule_set(&[bad]);
        assert_eq!(rep.findings.len(), 1);
        assert!(matches!(rep.findings[0], Finding::MalformedExamOrder { .. }));
    }

    #[test]
    fn trajectory_must_be_the_standard_order() {
        assert!(Trajectory::try_from(Stage::ALL.to_vec()).is_ok());
        assert!(Trajectory::try_from(vec![Stage::Diagnosis, Stage::SubjectiveSymptoms]).is_err());
    }

    #[test]
    fn rule_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rules.jsonl");
        let rules = vec![hydronephrosis()];
        write_rules(&p, &rules).unwrap();
        assert_eq!(read_rules(&p).unwrap(), rules);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"exam_order\":[1,2]"));
    }
}
