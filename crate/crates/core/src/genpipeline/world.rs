//! A small synthetic urology world and a deterministic chat backend that
//! converts and rewrites dialogues inside it.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{BackendError, BackendInfo, ChatBackend};
use super::{QaRecord, ROLE_PREFIXES};
use crate::corpus::{Role, Turn};
use crate::io::derive_seed;
use crate::rulemodel::{DiagnosticRule, DiseaseNameMap, HistoryCategory, RuleError};
use crate::template::sha256_hex;
use crate::text::Haystack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDisease {
    pub name: String,
    pub code: String,
    /// Opening complaint; unique to this disease.
    pub chief_complaint: String,
    pub other_symptoms: Vec<String>,
    /// Key exams, highest priority first.
    pub exams: Vec<String>,
    /// Result of each key exam, aligned with `exams`.
    pub findings: Vec<String>,
    pub history: Vec<HistoryCategory>,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub treatment: String,
}

impl WorldDisease {
    pub fn rule(&self) -> DiagnosticRule {
        let mut symptoms = vec![self.chief_complaint.as_str()];
        symptoms.extend(self.other_symptoms.iter().map(String::as_str));
        let exams: Vec<&str> = self.exams.iter().map(String::as_str).collect();
        DiagnosticRule::new(&self.name, &self.code, &symptoms, &exams, &self.history)
    }

    pub fn finding(&self, exam: &str) -> Option<&str> {
        self.exams.iter().position(|e| e == exam).map(|i| self.findings[i].as_str())
    }

    /// Follow-up items a compliant dialogue covers after the opening.
    pub fn item_count(&self) -> usize {
        self.other_symptoms.len() + self.exams.len() + self.history.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleWorld {
    pub diseases: Vec<WorldDisease>,
    /// Possible patient answers per history category.
    pub history_facts: BTreeMap<HistoryCategory, Vec<String>>,
    /// Exams outside every rule, with their results.
    #[serde(default)]
    pub extra_exams: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy)]
enum Item<'a> {
    Symptom(&'a str),
    Exam(&'a str, &'a str),
    History(HistoryCategory),
}

fn fill(template: &str, slot: &str) -> String {
    template.replace("{}", slot)
}

const OPENINGS: &[&str] = &["doctor , i have {} .", "hello doctor , i have had {} for a while .", "i am worried about {} , doctor ."];
const SYMPTOM_QUESTIONS: &[&str] = &["do you also have {} ?", "have you noticed any {} ?", "is there any {} ?"];
const SYMPTOM_ANSWERS: &[&str] = &["yes , i have {} .", "yes , there is some {} ."];
const EXAM_QUESTIONS: &[&str] =
    &["have you had a {} ? what did it show ?", "please tell me the result of the {} .", "we need the {} , what did it show ?"];
const DIAGNOSES: &[&str] = &["based on these findings , you likely have {} .", "the diagnosis is {} .", "this is most likely {} ."];

fn history_questions(c: HistoryCategory) -> &'static [&'static str] {
    match c {
        HistoryCategory::Medication => &["do you take any medication ?", "are you on any drugs ?"],
        HistoryCategory::Surgical => &["have you had any surgery before ?", "any previous operations ?"],
        HistoryCategory::PastMedical => &["do you have any chronic illness ?", "what is your past medical history ?"],
        HistoryCategory::Reproductive => &["do you have any children ?", "tell me about your reproductive history ."],
    }
}

/// Physician phrasing style of a dialogue: the index of the opening
/// template the patient used, so the history fixes the wording.
fn style_of(opening: &str) -> usize {
    OPENINGS
        .iter()
        .position(|t| {
            let (pre, post) = t.split_once("{}").expect("opening has a slot");
            opening.starts_with(pre) && opening.ends_with(post)
        })
        .unwrap_or(0)
}

fn styled<'a>(options: &[&'a str], style: usize) -> &'a str {
    options[style % options.len()]
}

fn pick<'a, R: Rng>(options: &[&'a str], rng: &mut R) -> &'a str {
    options.choose(rng).expect("non-empty phrasing list")
}

impl RuleWorld {
    /// Ten urological diseases with one to five follow-up items each.
    pub fn urology() -> Self {
        let d = |name: &str, code: &str, chief: &str, other: &[&str], exams: &[(&str, &str)], history: &[HistoryCategory], aliases: &[&str], treatment: &str| {
            WorldDisease {
                name: name.into(),
                code: code.into(),
                chief_complaint: chief.into(),
                other_symptoms: other.iter().map(|s| s.to_string()).collect(),
                exams: exams.iter().map(|e| e.0.to_string()).collect(),
                findings: exams.iter().map(|e| e.1.to_string()).collect(),
                history: history.to_vec(),
                aliases: aliases.iter().map(|s| s.to_string()).collect(),
                treatment: treatment.into(),
            }
        };
        use HistoryCategory::*;
        let diseases = vec![
            d("kidney stone", "N20", "flank pain", &["blood in urine"],
              &[("ultrasound", "a small stone in the kidney"), ("ct scan", "a dense spot in the kidney")],
              &[Medication], &["left kidney stone", "right kidney stone"], "drinking more water"),
            d("renal hydronephrosis", "N13", "waist soreness", &["nausea"],
              &[("ultrasound", "a swollen renal pelvis"), ("renal function test", "slightly raised creatinine")],
              &[Surgical], &["right renal hydronephrosis", "left renal hydronephrosis"], "a drainage tube"),
            d("bladder cancer", "C67", "painless hematuria", &["fever", "difficulty urinating"],
              &[("cystoscopy", "a mass on the bladder wall"), ("urine cytology", "atypical cells")],
              &[PastMedical], &["bladder tumor"], "surgery"),
            d("prostatitis", "N41", "perineal pain", &["frequent urination"],
              &[("urinalysis", "many white cells")],
              &[Reproductive], &["chronic prostatitis"], "antibiotics"),
            d("benign prostatic hyperplasia", "N40", "weak urine stream", &["nocturia"],
              &[("psa test", "a normal psa level"), ("ultrasound", "an enlarged prostate")],
              &[Medication], &["enlarged prostate"], "alpha blockers"),
            d("urinary tract infection", "N39", "burning urination", &["fever"],
              &[("urinalysis", "bacteria and white cells"), ("urine culture", "growth of bacteria")],
              &[], &["bladder infection"], "antibiotics"),
            d("pyelonephritis", "N10", "shaking chills", &["flank pain"],
              &[("blood test", "a high white cell count"), ("urinalysis", "white cell casts"), ("ultrasound", "a swollen kidney")],
              &[], &["acute pyelonephritis"], "antibiotics"),
            d("ureteral stone", "N20.1", "colicky pain", &["nausea", "blood in urine"],
              &[("ct scan", "a stone in the ureter"), ("urinalysis", "red cells")],
              &[], &["left ureteral stone", "right ureteral stone"], "drinking more water"),
            d("renal cyst", "N28", "abdominal fullness", &[],
              &[("ultrasound", "a round fluid sac"), ("ct scan", "a thin walled cyst")],
              &[PastMedical], &["simple renal cyst"], "regular checks"),
            d("urethritis", "N34", "urethral discharge", &["burning urination"],
              &[("urethral swab", "signs of infection")],
              &[Reproductive], &["acute urethritis"], "antibiotics"),
        ];
        Self {
            diseases,
            history_facts: Self::default_history_facts(),
            extra_exams: vec![
                ("mri".into(), "no abnormal signal".into()),
                ("chest x-ray".into(), "clear lungs".into()),
            ],
        }
    }

    fn default_history_facts() -> BTreeMap<HistoryCategory, Vec<String>> {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        BTreeMap::from([
            (HistoryCategory::Medication, v(&["i take aspirin every day .", "i take metformin .", "no , i do not take any medicine ."])),
            (HistoryCategory::Surgical, v(&["i had an appendix operation years ago .", "no , i have had no surgery ."])),
            (HistoryCategory::PastMedical, v(&["i have high blood pressure .", "i have diabetes .", "no , no chronic illness ."])),
            (HistoryCategory::Reproductive, v(&["i have two children .", "i have no children ."])),
        ])
    }

    /// A procedurally generated world with names like `stone_A`.
    pub fn generated(n: usize, seed: u64) -> Self {
        const KINDS: &[&str] = &["stone", "cyst", "tumor", "infection", "stricture"];
        const SYMPTOMS: &[&str] = &["fever", "nausea", "fatigue", "chills", "itching", "swelling"];
        const EXAMS: &[&str] = &["ultrasound", "ct scan", "urinalysis", "cystoscopy", "blood test", "urine culture"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diseases = (0..n)
            .map(|i| {
                let tag = format!("{}{}", (b'A' + (i % 26) as u8) as char, if i >= 26 { (i / 26).to_string() } else { String::new() });
                let n_other = rng.random_range(0..=2);
                let n_exam = rng.random_range(1..=2);
                let n_hist = rng.random_range(0..=(5 - n_other - n_exam).min(1));
                let other: Vec<String> = SYMPTOMS.choose_multiple(&mut rng, n_other).map(|s| s.to_string()).collect();
                let exams: Vec<String> = EXAMS.choose_multiple(&mut rng, n_exam).map(|s| s.to_string()).collect();
                let history: Vec<HistoryCategory> =
                    HistoryCategory::ALL.choose_multiple(&mut rng, n_hist).copied().collect();
                WorldDisease {
                    name: format!("{}_{tag}", KINDS[i % KINDS.len()]),
                    code: format!("G{i:02}"),
                    chief_complaint: format!("pain_{}", tag.to_lowercase()),
                    other_symptoms: other,
                    findings: (0..exams.len()).map(|j| format!("finding_{}{j}", tag.to_lowercase())).collect(),
                    exams,
                    history,
                    aliases: vec![],
                    treatment: "rest".into(),
                }
            })
            .collect();
        Self { diseases, history_facts: Self::default_history_facts(), extra_exams: vec![] }
    }

    pub fn rules(&self) -> Vec<DiagnosticRule> {
        self.diseases.iter().map(WorldDisease::rule).collect()
    }

    pub fn name_map(&self) -> Result<DiseaseNameMap, RuleError> {
        let rules = self.rules();
        let aliases: Vec<(&str, &str)> = self
            .diseases
            .iter()
            .flat_map(|d| d.aliases.iter().map(move |a| (a.as_str(), d.name.as_str())))
            .collect();
        DiseaseNameMap::new(&rules, aliases)
    }

    pub fn disease(&self, name: &str) -> Option<&WorldDisease> {
        self.diseases.iter().find(|d| d.name == name)
    }

    /// The disease whose name the text mentions; the longest name wins.
    pub fn find_disease(&self, text: &str) -> Option<&WorldDisease> {
        let h = Haystack::new(text);
        self.diseases
            .iter()
            .filter(|d| h.mentions(&d.name))
            .max_by_key(|d| (d.name.len(), std::cmp::Reverse(d.name.clone())))
    }

    /// Single-turn consultations spread round-robin over the diseases, with
    /// the disease phrased as the canonical name or one of its aliases.
    pub fn qa_records(&self, n: usize, seed: u64) -> Vec<QaRecord> {
        (0..n)
            .map(|i| {
                let d = &self.diseases[i % self.diseases.len()];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["qa", &i.to_string()]));
                let mut names = vec![d.name.as_str()];
                names.extend(d.aliases.iter().map(String::as_str));
                let raw = pick(&names, &mut rng);
                let mut q = fill(pick(OPENINGS, &mut rng), &d.chief_complaint);
                for s in &d.other_symptoms {
                    q.push(' ');
                    q.push_str(&fill("i also have {} .", s));
                }
                for (e, f) in d.exams.iter().zip(&d.findings) {
                    q.push_str(&format!(" the {e} showed {f} ."));
                }
                q.push_str(" what is wrong with me ?");
                QaRecord { question: q, disease_raw: raw.to_string(), source_id: format!("qa{i:05}") }
            })
            .collect()
    }

    fn items<'a>(d: &'a WorldDisease) -> Vec<Item<'a>> {
        let mut items: Vec<Item> = d.other_symptoms.iter().map(|s| Item::Symptom(s)).collect();
        items.extend(d.exams.iter().zip(&d.findings).map(|(e, f)| Item::Exam(e, f)));
        items.extend(d.history.iter().map(|h| Item::History(*h)));
        items
    }

    fn history_fact<R: Rng>(&self, c: HistoryCategory, rng: &mut R) -> String {
        self.history_facts
            .get(&c)
            .and_then(|v| v.choose(rng))
            .cloned()
            .unwrap_or_else(|| "no , none .".into())
    }

    /// The dialogue a rule-following physician would hold, reusing patient
    /// answers from `source` where it has them.
    fn compliant_turns<R: Rng>(&self, d: &WorldDisease, source: Option<&[Turn]>, rng: &mut R) -> Vec<Turn> {
        let opening = source
            .and_then(|s| s.first())
            .filter(|t| t.role == Role::Patient)
            .map(|t| t.text.clone())
            .unwrap_or_else(|| fill(pick(OPENINGS, rng), &d.chief_complaint));
        let style = style_of(&opening);
        let mut turns = vec![Turn::patient(opening)];
        for item in Self::items(d) {
            match item {
                Item::Symptom(s) => {
                    turns.push(Turn::physician(fill(styled(SYMPTOM_QUESTIONS, style), s)));
                    turns.push(Turn::patient(fill(pick(SYMPTOM_ANSWERS, rng), s)));
                }
                Item::Exam(e, f) => {
                    turns.push(Turn::physician(fill(styled(EXAM_QUESTIONS, style), e)));
                    let answer = match source {
                        Some(src) => src
                            .iter()
                            .find(|t| t.role == Role::Patient && Haystack::new(&t.text).mentions(e))
                            .map(|t| t.text.clone())
                            .unwrap_or_else(|| format!("no , i have not had the {e} .")),
                        None => format!("the {e} showed {f} ."),
                    };
                    turns.push(Turn::patient(answer));
                }
                Item::History(c) => {
                    turns.push(Turn::physician(styled(history_questions(c), style).to_string()));
                    let answer = match source {
                        Some(src) => answer_after(src, |t| c.keywords().iter().any(|k| Haystack::new(t).mentions(k)))
                            .unwrap_or_else(|| "no , none .".into()),
                        None => self.history_fact(c, rng),
                    };
                    turns.push(Turn::patient(answer));
                }
            }
        }
        turns.push(Turn::physician(fill(styled(DIAGNOSES, style), &d.name)));
        turns
    }

    /// A dialogue that contains every fact but does not follow the rule:
    /// items reordered or dropped, an early guess, and treatment advice.
    fn loose_turns<R: Rng>(&self, d: &WorldDisease, rng: &mut R) -> Vec<Turn> {
        let mut items = Self::items(d);
        match rng.random_range(0..4) {
            0 => {}
            1 => items.sort_by_key(|i| !matches!(i, Item::Exam(..))),
            2 => items.sort_by_key(|i| !matches!(i, Item::History(_))),
            _ => items.shuffle(rng),
        }
        if rng.random_bool(0.3) {
            if let Some(p) = items.iter().position(|i| matches!(i, Item::Symptom(_))) {
                items.remove(p);
            }
        }
        let mut turns = vec![Turn::patient(fill(pick(OPENINGS, rng), &d.chief_complaint))];
        if items.len() <= 4 && rng.random_bool(0.5) {
            turns.push(Turn::physician(format!("i suspect a diagnosis of {} , let us check more .", d.name)));
            turns.push(Turn::patient("ok , doctor .".to_string()));
        }
        for item in items {
            match item {
                Item::Symptom(s) => {
                    turns.push(Turn::physician(fill(pick(SYMPTOM_QUESTIONS, rng), s)));
                    turns.push(Turn::patient(fill(pick(SYMPTOM_ANSWERS, rng), s)));
                }
                Item::Exam(e, f) => {
                    turns.push(Turn::physician(fill(pick(EXAM_QUESTIONS, rng), e)));
                    turns.push(Turn::patient(format!("the {e} showed {f} .")));
                }
                Item::History(c) => {
                    turns.push(Turn::physician(pick(history_questions(c), rng).to_string()));
                    turns.push(Turn::patient(self.history_fact(c, rng)));
                }
            }
        }
        let diag = fill(pick(DIAGNOSES, rng), &d.name);
        turns.push(Turn::physician(format!("{diag} i recommend {} .", d.treatment)));
        turns
    }

    /// A rule-following dialogue for `d`, seeded.
    pub fn compliant_dialogue_turns(&self, d: &WorldDisease, seed: u64) -> Vec<Turn> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.compliant_turns(d, None, &mut rng)
    }
}

/// Text of the patient turn right after the first physician turn that
/// satisfies `asks`.
fn answer_after(turns: &[Turn], asks: impl Fn(&str) -> bool) -> Option<String> {
    turns.windows(2).find_map(|w| {
        (w[0].role == Role::Physician && w[1].role == Role::Patient && asks(&w[0].text)).then(|| w[1].text.clone())
    })
}

fn transcript_lines(prompt: &str) -> Vec<Turn> {
    prompt
        .lines()
        .filter_map(|l| {
            let l = l.trim();
            ROLE_PREFIXES.iter().find_map(|(p, role)| {
                l.strip_prefix(p).map(|rest| Turn { role: *role, text: rest.trim().to_string(), stage: None })
            })
        })
        .collect()
}

fn render(turns: &[Turn]) -> String {
    turns.iter().map(|t| format!("{} {}", t.role.label(), t.text)).collect::<Vec<_>>().join("\n")
}

/// Offline stand-in for a chat model. A prompt carrying a transcript is
/// rewritten to follow the rule of the disease it names; any other prompt
/// naming a disease is expanded into a loosely ordered dialogue.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    world: RuleWorld,
    /// Chance that a rewrite comes back still violating the rule.
    pub failure_rate: f64,
}

impl SyntheticBackend {
    pub fn new(world: RuleWorld) -> Self {
        Self { world, failure_rate: 0.0 }
    }

    pub fn with_failure_rate(mut self, p: f64) -> Self {
        self.failure_rate = p;
        self
    }

    pub fn world(&self) -> &RuleWorld {
        &self.world
    }
}

impl ChatBackend for SyntheticBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo { model: "synthetic".into(), max_context: usize::MAX, supports_temperature: false }
    }

    fn complete(&self, prompt: &str, _temperature: f64, seed: u64) -> Result<String, BackendError> {
        let d = self
            .world
            .find_disease(prompt)
            .ok_or_else(|| BackendError::Refused("prompt names no known disease".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["synthetic", &sha256_hex(prompt.as_bytes())]));
        let source = transcript_lines(prompt);
        if source.is_empty() {
            return Ok(render(&self.world.loose_turns(d, &mut rng)));
        }
        let mut turns = self.world.compliant_turns(d, Some(&source), &mut rng);
        if self.failure_rate > 0.0 && rng.random_bool(self.failure_rate.min(1.0)) {
            let last = turns.len() - 1;
            turns[last].text.push_str(&format!(" i recommend {} .", d.treatment));
        }
        Ok(render(&turns))
    }
}
