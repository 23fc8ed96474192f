//! Observation data parameter file.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::lexer::{entries, fmt_f64, parse_f64, Ctx, Entry};
use crate::error::Result;

/// How an error-std entry combines with the running total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ErrorStdOp {
    #[default]
    Equal,
    Plus,
    Mult,
    /// Keeps the larger of the two (acts as a lower bound).
    Min,
    /// Keeps the smaller of the two (acts as an upper bound).
    Max,
}

impl ErrorStdOp {
    fn parse(tok: &str) -> Option<Self> {
        let t = tok.to_ascii_uppercase();
        Some(match t.as_str() {
            "EQ" | "EQUAL" => ErrorStdOp::Equal,
            "PL" | "PLUS" => ErrorStdOp::Plus,
            "MU" | "MULT" => ErrorStdOp::Mult,
            "MI" | "MIN" => ErrorStdOp::Min,
            "MA" | "MAX" => ErrorStdOp::Max,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorStdOp::Equal => "EQUAL",
            ErrorStdOp::Plus => "PLUS",
            ErrorStdOp::Mult => "MULT",
            ErrorStdOp::Min => "MIN",
            ErrorStdOp::Max => "MAX",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ErrorStdSource {
    Const(f64),
    File { path: PathBuf, varname: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStdEntry {
    pub source: ErrorStdSource,
    pub op: ErrorStdOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsDataSection {
    pub product: String,
    pub reader: String,
    pub obstype: String,
    /// Glob patterns (`*`, `?`, `[...]`).
    pub files: Vec<String>,
    pub error_std: Vec<ErrorStdEntry>,
    /// Reader parameters, passed through unchanged.
    pub parameters: Vec<(String, String)>,
}

#[derive(Default)]
struct Partial {
    line: usize,
    product: String,
    reader: Option<String>,
    obstype: Option<String>,
    files: Vec<String>,
    error_std: Vec<ErrorStdEntry>,
    parameters: Vec<(String, String)>,
}

impl Partial {
    fn finish(self, ctx: &Ctx) -> Result<ObsDataSection> {
        let p = &self.product;
        let reader = self
            .reader
            .ok_or_else(|| ctx.err(self.line, format!("product \"{p}\": READER not specified")))?;
        let obstype = self
            .obstype
            .ok_or_else(|| ctx.err(self.line, format!("product \"{p}\": TYPE not specified")))?;
        if self.files.is_empty() {
            return Err(ctx.err(self.line, format!("product \"{p}\": no FILE entries")));
        }
        Ok(ObsDataSection {
            product: self.product,
            reader,
            obstype,
            files: self.files,
            error_std: self.error_std,
            parameters: self.parameters,
        })
    }
}

fn error_std(ctx: &Ctx, e: &Entry) -> Result<ErrorStdEntry> {
    let bad = || ctx.err(e.line, "ERROR_STD: expected { <value> | <file> <variable> } [EQ | PL | MU | MI | MA]");
    let toks = &e.tokens;
    let first = toks.first().ok_or_else(bad)?;
    let (source, rest) = match parse_f64(first) {
        Some(v) => {
            if !(v > 0.0) {
                return Err(ctx.err(e.line, format!("ERROR_STD: value {v} must be positive")));
            }
            (ErrorStdSource::Const(v), &toks[1..])
        }
        None => {
            let varname = toks.get(1).ok_or_else(bad)?;
            (
                ErrorStdSource::File {
                    path: PathBuf::from(first),
                    varname: varname.clone(),
                },
                &toks[2..],
            )
        }
    };
    let op = match rest {
        [] => ErrorStdOp::Equal,
        [op] => ErrorStdOp::parse(op).ok_or_else(bad)?,
        _ => return Err(bad()),
    };
    Ok(ErrorStdEntry { source, op })
}

fn parameter(ctx: &Ctx, e: &Entry) -> Result<(String, String)> {
    let joined = e.value.replace("==", "=");
    let (name, value) = match joined.split_once('=') {
        Some((n, v)) => (n.trim().to_string(), v.trim().to_string()),
        None => match e.tokens.as_slice() {
            [n, v] => (n.clone(), v.clone()),
            _ => return Err(ctx.err(e.line, "PARAMETER: expected <name> = <value>")),
        },
    };
    if name.is_empty() || value.is_empty() || name.contains(char::is_whitespace) {
        return Err(ctx.err(e.line, "PARAMETER: expected <name> = <value>"));
    }
    Ok((name, value))
}

pub fn parse_obsdata(text: &str) -> Result<Vec<ObsDataSection>> {
    let ctx = Ctx {
        source_name: "observation data parameter file",
    };
    let mut out = Vec::new();
    let mut cur: Option<Partial> = None;
    for e in entries(text, ctx.source_name)? {
        if e.key == "PRODUCT" {
            if let Some(p) = cur.take() {
                out.push(p.finish(&ctx)?);
            }
            cur = Some(Partial {
                line: e.line,
                product: ctx.single(&e)?.to_string(),
                ..Default::default()
            });
            continue;
        }
        let Some(p) = cur.as_mut() else {
            return Err(ctx.err(e.line, format!("{} found before the first PRODUCT entry", e.key)));
        };
        match e.key.as_str() {
            "READER" => ctx.set_once(&mut p.reader, &e, ctx.single(&e)?.to_string())?,
            "TYPE" => ctx.set_once(&mut p.obstype, &e, ctx.single(&e)?.to_string())?,
            "FILE" => {
                if e.value.is_empty() {
                    return Err(ctx.err(e.line, "FILE: missing value"));
                }
                p.files.push(e.value.clone());
            }
            "ERROR_STD" => p.error_std.push(error_std(&ctx, &e)?),
            "PARAMETER" => p.parameters.push(parameter(&ctx, &e)?),
            other => return Err(ctx.err(e.line, format!("unknown entry \"{other}\""))),
        }
    }
    if let Some(p) = cur.take() {
        out.push(p.finish(&ctx)?);
    }
    Ok(out)
}

pub fn obsdata_to_prm_string(sections: &[ObsDataSection]) -> String {
    let mut s = String::new();
    for sec in sections {
        let _ = writeln!(s, "PRODUCT = {}", sec.product);
        let _ = writeln!(s, "READER = {}", sec.reader);
        let _ = writeln!(s, "TYPE = {}", sec.obstype);
        for f in &sec.files {
            let _ = writeln!(s, "FILE = {f}");
        }
        for es in &sec.error_std {
            match &es.source {
                ErrorStdSource::Const(v) => {
                    let _ = writeln!(s, "ERROR_STD = {} {}", fmt_f64(*v), es.op.as_str());
                }
                ErrorStdSource::File { path, varname } => {
                    let _ = writeln!(s, "ERROR_STD = {} {} {}", path.display(), varname, es.op.as_str());
                }
            }
        }
        for (n, v) in &sec.parameters {
            let _ = writeln!(s, "PARAMETER {n} = {v}");
        }
        s.push('\n');
    }
    s
}
