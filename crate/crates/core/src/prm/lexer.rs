//! Line-oriented `KEY [=|==] value` lexer shared by all parameter files.

use crate::error::{Error, Result};

/// One non-empty, non-comment line of a parameter file.
#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub line: usize,
    /// Upper-cased key.
    pub key: String,
    pub value: String,
    pub tokens: Vec<String>,
}

pub(crate) fn entries(text: &str, source_name: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let key_end = content
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(content.len());
        if key_end == 0 {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line,
                msg: format!("could not find a key in \"{content}\""),
            });
        }
        let key = content[..key_end].to_ascii_uppercase();
        let mut rest = content[key_end..].trim_start();
        if let Some(r) = rest.strip_prefix("==") {
            rest = r;
        } else if let Some(r) = rest.strip_prefix('=') {
            rest = r;
        }
        let value = rest.trim().to_string();
        let tokens = value.split_whitespace().map(str::to_string).collect();
        out.push(Entry {
            line,
            key,
            value,
            tokens,
        });
    }
    Ok(out)
}

/// Error helper bound to a source name.
#[derive(Clone, Copy)]
pub(crate) struct Ctx<'a> {
    pub source_name: &'a str,
}

impl<'a> Ctx<'a> {
    pub fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            source_name: self.source_name.to_string(),
            line,
            msg: msg.into(),
        }
    }

    pub fn f64(&self, e: &Entry, tok: &str) -> Result<f64> {
        parse_f64(tok).ok_or_else(|| self.err(e.line, format!("{}: malformed number \"{tok}\"", e.key)))
    }

    pub fn usize(&self, e: &Entry, tok: &str) -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| self.err(e.line, format!("{}: malformed integer \"{tok}\"", e.key)))
    }

    /// Exactly one token.
    pub fn single<'e>(&self, e: &'e Entry) -> Result<&'e str> {
        match e.tokens.as_slice() {
            [t] => Ok(t.as_str()),
            [] => Err(self.err(e.line, format!("{}: missing value", e.key))),
            _ => Err(self.err(e.line, format!("{}: expected a single value", e.key))),
        }
    }

    pub fn list_f64(&self, e: &Entry) -> Result<Vec<f64>> {
        if e.tokens.is_empty() {
            return Err(self.err(e.line, format!("{}: missing value", e.key)));
        }
        e.tokens.iter().map(|t| self.f64(e, t)).collect()
    }

    pub fn set_once<T>(&self, slot: &mut Option<T>, e: &Entry, v: T) -> Result<()> {
        if slot.is_some() {
            return Err(self.err(e.line, format!("duplicate entry {}", e.key)));
        }
        *slot = Some(v);
        Ok(())
    }
}

/// Accepts `inf`, `-inf` and `NaN` spellings in any case.
pub(crate) fn parse_f64(tok: &str) -> Option<f64> {
    tok.parse::<f64>().ok().or_else(|| match tok.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Some(f64::INFINITY),
        "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        _ => None,
    })
}

pub(crate) fn parse_yes_no(tok: &str) -> Option<bool> {
    match tok.to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" | "1" => Some(true),
        "no" | "n" | "false" | "0" => Some(false),
        _ => None,
    }
}

/// Formats a float in the canonical serializer form; infinities as `inf`/`-inf`.
pub(crate) fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// Pairs of numbers, ignoring any `[` / `]` decoration.
pub(crate) fn intervals(ctx: &Ctx, e: &Entry, toks: &[String]) -> Result<Vec<(f64, f64)>> {
    let cleaned: Vec<String> = toks
        .iter()
        .map(|t| t.replace(['[', ']'], ""))
        .filter(|t| !t.is_empty())
        .collect();
    if !cleaned.len().is_multiple_of(2) {
        return Err(ctx.err(e.line, format!("{}: depth intervals must come in pairs", e.key)));
    }
    let mut out = Vec::with_capacity(cleaned.len() / 2);
    for pair in cleaned.chunks(2) {
        let z1 = ctx.f64(e, &pair[0])?;
        let z2 = ctx.f64(e, &pair[1])?;
        if !(z1 <= z2) {
            return Err(ctx.err(e.line, format!("{}: interval [{z1} {z2}] is inverted", e.key)));
        }
        out.push((z1, z2));
    }
    Ok(out)
}
