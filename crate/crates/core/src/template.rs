//! Minimal `{placeholder}` rendering for prompt templates.
//!
//! A placeholder is `{name}` with `name` made of lowercase ASCII letters and
//! underscores. Every placeholder in the template must be bound; values are
//! inserted verbatim and never rescanned, so code containing braces is safe.
//! `{{` and `}}` render literal braces. Any other brace text (`{ }`, `{0}`)
//! is left untouched.

use std::collections::BTreeSet;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template placeholder {{{0}}} has no binding")]
    Unresolved(String),
}

fn placeholder_at(template: &str, start: usize) -> Option<&str> {
    let rest = &template[start + 1..];
    let end = rest.find('}')?;
    let name = &rest[..end];
    let valid = !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_');
    valid.then_some(name)
}

/// Renders `template`, substituting each `{name}` from `bindings`.
pub fn render(template: &str, bindings: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut i = 0;
    let bytes = template.as_bytes();
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push('}');
                i += 2;
            }
            b'{' => match placeholder_at(template, i) {
                Some(name) => {
                    let value = bindings
                        .iter()
                        .find(|(k, _)| *k == name)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::Unresolved(name.to_string()))?;
                    out.push_str(value);
                    i += name.len() + 2;
                }
                None => {
                    out.push('{');
                    i += 1;
                }
            },
            _ => {
                let ch = template[i..].chars().next().expect("in bounds");
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    Ok(out)
}

/// Placeholder names referenced by `template`.
pub fn placeholders(template: &str) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if bytes.get(i + 1) == Some(&b'{') {
                i += 2;
                continue;
            }
            if let Some(name) = placeholder_at(template, i) {
                names.insert(name.to_string());
                i += name.len() + 2;
                continue;
            }
        }
        i += 1;
    }
    names
}
