//! Model parameter file: model name and the variables making up the state.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::lexer::{entries, fmt_f64, Ctx};
use super::mainprm::Inflation;
use crate::error::Result;

/// Forgetting model `x <- lambda x + sqrt(1 - lambda^2) sigma0 N(0,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Randomise {
    pub lambda: f64,
    pub sigma0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVar {
    pub name: String,
    pub grid: Option<String>,
    /// Overrides the main-file inflation for this variable.
    pub inflation: Option<Inflation>,
    pub randomise: Option<Randomise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub vars: Vec<ModelVar>,
}

impl ModelConfig {
    pub fn var(&self, name: &str) -> Option<&ModelVar> {
        self.vars.iter().find(|v| v.name == name)
    }

    pub fn to_prm_string(&self) -> String {
        let mut s = format!("NAME = {}\n", self.name);
        for v in &self.vars {
            let _ = writeln!(s, "\nVAR = {}", v.name);
            if let Some(g) = &v.grid {
                let _ = writeln!(s, "GRID = {g}");
            }
            if let Some(i) = v.inflation {
                let _ = writeln!(s, "INFLATION = {}", i.to_prm());
            }
            if let Some(r) = v.randomise {
                let _ = writeln!(s, "RANDOMISE = {} {}", fmt_f64(r.lambda), fmt_f64(r.sigma0));
            }
        }
        s
    }
}

pub fn parse_model(text: &str) -> Result<ModelConfig> {
    let ctx = Ctx {
        source_name: "model parameter file",
    };
    let mut name: Option<String> = None;
    let mut vars: Vec<ModelVar> = Vec::new();
    let mut seen: Vec<(usize, [bool; 3])> = Vec::new();

    for e in entries(text, ctx.source_name)? {
        if e.key == "NAME" {
            ctx.set_once(&mut name, &e, ctx.single(&e)?.to_string())?;
            continue;
        }
        if e.key == "VAR" {
            let vname = ctx.single(&e)?.to_string();
            if vars.iter().any(|v| v.name == vname) {
                return Err(ctx.err(e.line, format!("variable \"{vname}\" defined twice")));
            }
            vars.push(ModelVar {
                name: vname,
                grid: None,
                inflation: None,
                randomise: None,
            });
            seen.push((e.line, [false; 3]));
            continue;
        }
        let (Some(var), Some((_, flags))) = (vars.last_mut(), seen.last_mut()) else {
            return Err(ctx.err(e.line, format!("{} found before the first VAR entry", e.key)));
        };
        let dup = |ctx: &Ctx, f: &mut bool| {
            if *f {
                Err(ctx.err(e.line, format!("duplicate entry {} for VAR {}", e.key, var.name)))
            } else {
                *f = true;
                Ok(())
            }
        };
        match e.key.as_str() {
            "GRID" => {
                dup(&ctx, &mut flags[0])?;
                var.grid = Some(ctx.single(&e)?.to_string());
            }
            "INFLATION" => {
                dup(&ctx, &mut flags[1])?;
                var.inflation = Some(Inflation::parse(&ctx, &e)?);
            }
            "RANDOMISE" | "RANDOMIZE" => {
                dup(&ctx, &mut flags[2])?;
                let [l, s] = e.tokens.as_slice() else {
                    return Err(ctx.err(e.line, "RANDOMISE: expected <deflation> <sigma>"));
                };
                let lambda = ctx.f64(&e, l)?;
                let sigma0 = ctx.f64(&e, s)?;
                if !(lambda > 0.0 && lambda <= 1.0) {
                    return Err(ctx.err(e.line, format!("RANDOMISE: {lambda} is outside (0, 1]")));
                }
                if !(sigma0 >= 0.0) {
                    return Err(ctx.err(e.line, "RANDOMISE: sigma must be non-negative"));
                }
                var.randomise = Some(Randomise { lambda, sigma0 });
            }
            other => return Err(ctx.err(e.line, format!("unknown entry \"{other}\""))),
        }
    }

    let name = name.ok_or_else(|| ctx.err(0, "NAME not specified"))?;
    if vars.is_empty() {
        return Err(ctx.err(0, "no VAR blocks"));
    }
    Ok(ModelConfig { name, vars })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prm::InflationCap;

    #[test]
    fn var_level_inflation_override() {
        let m = parse_model("NAME = roms\nVAR = temp\nINFLATION = 1.07 PLAIN\n\nVAR = salt\nRANDOMISE 0.99 0.1\n").unwrap();
        assert_eq!(m.name, "roms");
        let t = m.var("temp").unwrap();
        assert_eq!(t.inflation, Some(Inflation { mult: 1.07, cap: InflationCap::Plain }));
        assert_eq!(m.var("salt").unwrap().randomise, Some(Randomise { lambda: 0.99, sigma0: 0.1 }));
        assert!(m.var("salt").unwrap().inflation.is_none());
    }

    #[test]
    fn entry_before_var() {
        assert!(parse_model("NAME = x\nINFLATION = 1.1\nVAR = a\n").is_err());
    }

    #[test]
    fn missing_name() {
        let e = parse_model("VAR = a\n").unwrap_err().to_string();
        assert!(e.contains("NAME"), "{e}");
    }

    #[test]
    fn round_trip() {
        let m = parse_model("NAME = roms\nVAR = temp\nGRID = g\nINFLATION = 1.07 0.3\nRANDOMISE 0.9 2\nVAR = u\n").unwrap();
        assert_eq!(parse_model(&m.to_prm_string()).unwrap(), m);
    }
}
