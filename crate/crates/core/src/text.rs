//! Text normalization, tokenization schemes and term matching.

use serde::{Deserialize, Serialize};

/// How surface text is cut into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Whitespace-separated words (Latin-script corpora).
    #[default]
    Word,
    /// One token per non-whitespace character (CJK corpora).
    Char,
}

impl Scheme {
    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            Scheme::Word => text.split_whitespace().collect(),
            Scheme::Char => text
                .char_indices()
                .filter(|(_, c)| !c.is_whitespace())
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
        }
    }

    pub fn count(&self, text: &str) -> usize {
        match self {
            Scheme::Word => text.split_whitespace().count(),
            Scheme::Char => text.chars().filter(|c| !c.is_whitespace()).count(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Scheme::Word => "word",
            Scheme::Char => "char",
        }
    }
}

/// Trim, collapse internal whitespace, case-fold.
pub fn normalize_name(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

/// Lowercased word tokens with punctuation stripped; `_` and `-` are kept
/// inside words.
pub fn term_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' || c == '-' {
            for l in c.to_lowercase() {
                cur.push(l);
            }
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// A text prepared once for repeated term lookups.
#[derive(Debug, Clone)]
pub struct Haystack {
    tokens: Vec<String>,
    squashed: String,
}

impl Haystack {
    pub fn new(text: &str) -> Self {
        let squashed: String = text
            .chars()
            .filter(|c| !c.is_whitespace())
            .flat_map(char::to_lowercase)
            .collect();
        Self { tokens: term_tokens(text), squashed }
    }

    /// Whole-word phrase match; terms containing CJK characters fall back to
    /// substring matching since they carry no word boundaries.
    pub fn mentions(&self, term: &str) -> bool {
        if term.chars().any(is_cjk) {
            let needle: String = term
                .chars()
                .filter(|c| !c.is_whitespace())
                .flat_map(char::to_lowercase)
                .collect();
            return !needle.is_empty() && self.squashed.contains(&needle);
        }
        let needle = term_tokens(term);
        if needle.is_empty() || needle.len() > self.tokens.len() {
            return false;
        }
        self.tokens.windows(needle.len()).any(|w| w == needle.as_slice())
    }

    /// Any token starting with `prefix` (e.g. `diagnos` for diagnosis/diagnose).
    pub fn has_word_prefix(&self, prefix: &str) -> bool {
        let p = prefix.to_lowercase();
        self.tokens.iter().any(|t| t.starts_with(&p))
    }

    /// Position of the first whole-word match, in tokens.
    pub fn position(&self, term: &str) -> Option<usize> {
        let needle = term_tokens(term);
        if needle.is_empty() || needle.len() > self.tokens.len() {
            return None;
        }
        self.tokens.windows(needle.len()).position(|w| w == needle.as_slice())
    }
}

pub fn mentions(text: &str, term: &str) -> bool {
    Haystack::new(text).mentions(term)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_trims_collapses_and_folds() {
        assert_eq!(normalize_name("  Right   Renal\tHydronephrosis "), "right renal hydronephrosis");
    }

    #[test]
    fn phrase_matching_respects_word_boundaries() {
        let h = Haystack::new("Have you had a renal CT? No fever.");
        assert!(h.mentions("renal ct"));
        assert!(h.mentions("fever"));
        assert!(!h.mentions("ct urogram"));
        assert!(!Haystack::new("a fevered state").mentions("fever"));
    }

    #[test]
    fn cjk_terms_match_as_substrings() {
        let h = Haystack::new("我右侧腰隐隐痛了好几个月，无发热");
        assert!(h.mentions("发热"));
        assert!(!h.mentions("血尿"));
    }

    #[test]
    fn char_scheme_skips_whitespace() {
        assert_eq!(Scheme::Char.split("医生 您好"), vec!["医", "生", "您", "好"]);
        assert_eq!(Scheme::Word.count(" a  b c "), 3);
    }
}
