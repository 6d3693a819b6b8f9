//! Closed-vocabulary tokenizer with reserved ids for padding, sequence
//! boundaries, unknown tokens and the two speaker markers.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{SftExample, PATIENT_LABEL, PHYSICIAN_LABEL};
use crate::text::Scheme;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const PATIENT: u32 = 4;
pub const PHYSICIAN: u32 = 5;

const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", PATIENT_LABEL, PHYSICIAN_LABEL];
const PATIENT_ALIASES: [&str; 2] = [PATIENT_LABEL, "患者："];
const PHYSICIAN_ALIASES: [&str; 3] = [PHYSICIAN_LABEL, "Physician:", "医生："];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TokenizerRecord", try_from = "TokenizerRecord")]
pub struct Tokenizer {
    scheme: Scheme,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRecord {
    scheme: Scheme,
    vocab: Vec<String>,
}

impl From<Tokenizer> for TokenizerRecord {
    fn from(t: Tokenizer) -> Self {
        Self { scheme: t.scheme, vocab: t.vocab }
    }
}

impl TryFrom<TokenizerRecord> for Tokenizer {
    type Error = String;

    fn try_from(r: TokenizerRecord) -> Result<Self, String> {
        Tokenizer::from_vocab(r.vocab, r.scheme)
    }
}

/// Splits a rendered history into `(is_physician, text)` turns. Lines that do
/// not start with a speaker marker continue the previous turn.
pub fn split_turns(context: &str) -> Vec<(bool, String)> {
    let mut turns: Vec<(bool, String)> = Vec::new();
    for line in context.lines() {
        let trimmed = line.trim_start();
        let marker = PATIENT_ALIASES
            .iter()
            .map(|m| (false, *m))
            .chain(PHYSICIAN_ALIASES.iter().map(|m| (true, *m)))
            .find(|(_, m)| trimmed.starts_with(m));
        match marker {
            Some((physician, m)) => turns.push((physician, trimmed[m.len()..].trim().to_string())),
            None => {
                if let Some(last) = turns.last_mut() {
                    if !line.trim().is_empty() {
                        if !last.1.is_empty() {
                            last.1.push(' ');
                        }
                        last.1.push_str(line.trim());
                    }
                }
            }
        }
    }
    turns
}

impl Tokenizer {
    /// Vocabulary of every token in `texts` plus the reserved entries. Ids
    /// follow sorted order, so the result does not depend on text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, scheme: Scheme) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for w in scheme.split(t) {
                if !RESERVED.contains(&w) && !PATIENT_ALIASES.contains(&w) && !PHYSICIAN_ALIASES.contains(&w) {
                    words.insert(w.to_string());
                }
            }
        }
        let vocab = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_vocab(vocab, scheme).expect("built vocabulary is valid")
    }

    /// Vocabulary of all turn texts in the examples (contexts and targets).
    pub fn from_examples(examples: &[SftExample], scheme: Scheme) -> Self {
        let mut texts = Vec::new();
        for ex in examples {
            texts.extend(split_turns(&ex.context).into_iter().map(|(_, t)| t));
            texts.push(ex.target.clone());
        }
        Self::build(texts.iter().map(String::as_str), scheme)
    }

    pub fn from_vocab(vocab: Vec<String>, scheme: Scheme) -> Result<Self, String> {
        if vocab.len() < RESERVED.len() || vocab[..RESERVED.len()] != RESERVED {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, w) in vocab.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(format!("duplicate vocabulary entry {w:?}"));
            }
        }
        for (m, id) in PATIENT_ALIASES.iter().map(|m| (m, PATIENT)).chain(PHYSICIAN_ALIASES.iter().map(|m| (m, PHYSICIAN))) {
            index.entry(m.to_string()).or_insert(id);
        }
        Ok(Self { scheme, vocab, index })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.scheme.split(text).into_iter().map(|w| self.id(w)).collect()
    }

    /// `BOS`, then each turn as marker + tokens + `EOS`. A trailing turn with
    /// no text is the cue for the next speaker and gets no `EOS`.
    pub fn encode_context(&self, context: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        for (physician, text) in split_turns(context) {
            out.push(if physician { PHYSICIAN } else { PATIENT });
            if !text.is_empty() {
                out.extend(self.encode(&text));
                out.push(EOS);
            }
        }
        out
    }

    pub fn encode_target(&self, text: &str) -> Vec<u32> {
        let mut out = self.encode(text);
        out.push(EOS);
        out
    }

    pub fn encode_example(&self, ex: &SftExample) -> (Vec<u32>, Vec<u32>) {
        (self.encode_context(&ex.context), self.encode_target(&ex.target))
    }

    /// Canonical text for `ids`: boundary tokens dropped, each speaker
    /// marker starting a new line.
    pub fn decode(&self, ids: &[u32]) -> String {
        let sep = match self.scheme {
            Scheme::Word => " ",
            Scheme::Char => "",
        };
        let mut out = String::new();
        let mut at_line_start = true;
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                PATIENT | PHYSICIAN => {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(self.token(id));
                    out.push(' ');
                    at_line_start = true;
                }
                _ => {
                    if !at_line_start {
                        out.push_str(sep);
                    }
                    out.push_str(self.token(id));
                    at_line_start = false;
                }
            }
        }
        out.trim_end().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build(["i have flank pain", "how long has it hurt ?"], Scheme::Word)
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let t = tok();
        assert_eq!(t.id("<eos>"), EOS);
        assert_eq!(t.id(PHYSICIAN_LABEL), PHYSICIAN);
        assert_eq!(t.id("医生："), PHYSICIAN);
        assert_eq!(t.id("never-seen"), UNK);
        assert_eq!(t.len(), 6 + 10);
    }

    #[test]
    fn round_trip_in_vocabulary_text() {
        let t = tok();
        for s in ["i have flank pain", "how long has it hurt ?"] {
            assert_eq!(t.decode(&t.encode(s)), s);
            assert_eq!(t.decode(&t.encode_target(s)), s);
        }
    }

    #[test]
    fn context_encoding_marks_turns() {
        let t = tok();
        let ids = t.encode_context("Patient: i have flank pain\nDoctor:");
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[1], PATIENT);
        assert_eq!(ids[ids.len() - 2], EOS);
        assert_eq!(*ids.last().unwrap(), PHYSICIAN);
        assert_eq!(t.decode(&ids), "Patient: i have flank pain\nDoctor:");
    }

    #[test]
    fn serde_round_trip() {
        let t = tok();
        let s = serde_json::to_string(&t).unwrap();
        let back: Tokenizer = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn turn_splitting_handles_aliases_and_continuations() {
        let turns = split_turns("患者：腰痛\nPhysician: how long\nsince when ?\nDoctor:");
        assert_eq!(
            turns,
            vec![(false, "腰痛".into()), (true, "how long since when ?".into()), (true, String::new())]
        );
    }
}
