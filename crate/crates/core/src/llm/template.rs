use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Kbr,
    VarianceRefine,
    CorrelationRefine,
}

const KBR: &str = include_str!("../../templates/kbr.txt");
const VARIANCE: &str = include_str!("../../templates/variance_refine.txt");
const CORRELATION: &str = include_str!("../../templates/correlation_refine.txt");

impl TemplateKind {
    pub fn text(self) -> &'static str {
        match self {
            TemplateKind::Kbr => KBR,
            TemplateKind::VarianceRefine => VARIANCE,
            TemplateKind::CorrelationRefine => CORRELATION,
        }
    }

    /// Distinct placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for tok in scan(self.text()) {
            if let Token::Slot(name) = tok {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

enum Token<'a> {
    Text(&'a str),
    Slot(&'a str),
}

// `{name}` with name in [a-z_]+ is a slot; any other brace is literal text.
fn scan(text: &str) -> Vec<Token<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                if start < i {
                    out.push(Token::Text(&text[start..i]));
                }
                out.push(Token::Slot(&text[i + 1..j]));
                i = j + 1;
                start = i;
                continue;
            }
        }
        i += 1;
    }
    if start < text.len() {
        out.push(Token::Text(&text[start..]));
    }
    out
}

/// Fills every slot in one pass; bound values are never re-scanned.
pub fn render(kind: TemplateKind, bindings: &BTreeMap<String, String>) -> Result<String, LlmError> {
    render_text(kind.text(), bindings)
}

pub fn render_text(text: &str, bindings: &BTreeMap<String, String>) -> Result<String, LlmError> {
    let mut out = String::with_capacity(text.len() + 256);
    for tok in scan(text) {
        match tok {
            Token::Text(t) => out.push_str(t),
            Token::Slot(name) => {
                let v = bindings
                    .get(name)
                    .ok_or_else(|| LlmError::MissingPlaceholder(name.to_string()))?;
                out.push_str(v);
            }
        }
    }
    Ok(out)
}
