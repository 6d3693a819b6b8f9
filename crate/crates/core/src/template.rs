//! Double-brace prompt templates (`{{NAME}}`).

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template references unknown placeholder {{{{{0}}}}}")]
    UnresolvedPlaceholder(String),
    #[error("unterminated placeholder starting at byte {0}")]
    Unterminated(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

/// A parsed template. Placeholder names may be padded with spaces inside the
/// braces (`{{ QUESTION }}`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut rest = source;
        let mut offset = 0;
        while let Some(start) = rest.find("{{") {
            if start > 0 {
                pieces.push(Piece::Text(rest[..start].to_string()));
            }
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or(TemplateError::Unterminated(offset + start))?;
            pieces.push(Piece::Slot(after[..end].trim().to_string()));
            let consumed = start + 2 + end + 2;
            offset += consumed;
            rest = &rest[consumed..];
        }
        if !rest.is_empty() {
            pieces.push(Piece::Text(rest.to_string()));
        }
        Ok(Self { source: source.to_string(), pieces })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn placeholders(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(n) => Some(n.as_str()),
                Piece::Text(_) => None,
            })
            .collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    pub fn has_placeholder(&self, name: &str) -> bool {
        self.placeholders().contains(&name)
    }

    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.source.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(name) => match bindings.get(name.as_str()) {
                    Some(v) => out.push_str(v),
                    None => return Err(TemplateError::UnresolvedPlaceholder(name.clone())),
                },
            }
        }
        Ok(out)
    }

    /// Hex SHA-256 of the raw template text, recorded in corpus manifests.
    pub fn digest(&self) -> String {
        sha256_hex(self.source.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Built-in templates; the CLI writes these out on `init` and reads files
/// from the configured directory afterwards.
pub mod defaults {
    pub const RULE: &str = include_str!("../templates/rule.txt");
    pub const CONVERT: &str = include_str!("../templates/convert.txt");
    pub const RULEIFY: &str = include_str!("../templates/ruleify.txt");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_padded_placeholders() {
        let t = Template::parse("Q: {{ QUESTION }} / D: {{DISEASE}}").unwrap();
        assert_eq!(t.placeholders(), vec!["DISEASE", "QUESTION"]);
        let mut b = BTreeMap::new();
        b.insert("QUESTION", "why".to_string());
        b.insert("DISEASE", "x".to_string());
        assert_eq!(t.render(&b).unwrap(), "Q: why / D: x");
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let t = Template::parse("{{NOPE}}").unwrap();
        assert_eq!(
            t.render(&BTreeMap::new()),
            Err(TemplateError::UnresolvedPlaceholder("NOPE".into()))
        );
        assert!(matches!(Template::parse("a {{ b"), Err(TemplateError::Unterminated(2))));
    }

    #[test]
    fn builtin_templates_carry_expected_slots() {
        assert!(Template::parse(defaults::CONVERT).unwrap().has_placeholder("QUESTION"));
        assert!(Template::parse(defaults::CONVERT).unwrap().has_placeholder("DISEASE"));
        let ruleify = Template::parse(defaults::RULEIFY).unwrap();
        assert!(ruleify.has_placeholder("RULE_PHYSICIAN"));
        assert!(ruleify.has_placeholder("DIALOGUES"));
    }
}
