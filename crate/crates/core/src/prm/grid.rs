//! Grid parameter file.
//!
//! `DATA` names a directory; each `*VARNAME` entry names an array file
//! `<DATA>/<varname>.ekc` inside it.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::lexer::{entries, Ctx};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridUsage {
    Prep,
    Calc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub name: String,
    pub usage: Option<GridUsage>,
    pub data: PathBuf,
    pub xdimname: Option<String>,
    pub ydimname: Option<String>,
    pub zdimname: Option<String>,
    pub xvarname: String,
    pub yvarname: String,
    pub zvarname: String,
    pub depthvarname: String,
    pub numlevelsvarname: String,
}

#[derive(Default)]
struct Partial {
    line: usize,
    name: Option<String>,
    usage: Option<GridUsage>,
    vtype: Option<()>,
    data: Option<PathBuf>,
    xdim: Option<String>,
    ydim: Option<String>,
    zdim: Option<String>,
    xvar: Option<String>,
    yvar: Option<String>,
    zvar: Option<String>,
    depthvar: Option<String>,
    numlevelsvar: Option<String>,
}

impl Partial {
    fn finish(self, ctx: &Ctx) -> Result<GridConfig> {
        let name = self.name.unwrap_or_default();
        let need = |v: Option<String>, key: &str| {
            v.ok_or_else(|| ctx.err(self.line, format!("grid \"{name}\": {key} not specified")))
        };
        if self.vtype.is_none() {
            return Err(ctx.err(self.line, format!("grid \"{name}\": VTYPE not specified")));
        }
        let data = self
            .data
            .ok_or_else(|| ctx.err(self.line, format!("grid \"{name}\": DATA not specified")))?;
        Ok(GridConfig {
            xvarname: need(self.xvar, "XVARNAME")?,
            yvarname: need(self.yvar, "YVARNAME")?,
            zvarname: need(self.zvar, "ZVARNAME")?,
            depthvarname: need(self.depthvar, "DEPTHVARNAME")?,
            numlevelsvarname: need(self.numlevelsvar, "NUMLEVELSVARNAME")?,
            name,
            usage: self.usage,
            data,
            xdimname: self.xdim,
            ydimname: self.ydim,
            zdimname: self.zdim,
        })
    }
}

pub fn parse_grid(text: &str) -> Result<Vec<GridConfig>> {
    let ctx = Ctx {
        source_name: "grid parameter file",
    };
    let mut grids = Vec::new();
    let mut cur: Option<Partial> = None;

    for e in entries(text, ctx.source_name)? {
        if e.key == "NAME" {
            if let Some(p) = cur.take() {
                grids.push(p.finish(&ctx)?);
            }
            let (name, usage) = match e.tokens.as_slice() {
                [n] => (n.clone(), None),
                [n, u] => {
                    let usage = match u.to_ascii_uppercase().as_str() {
                        "PREP" => GridUsage::Prep,
                        "CALC" => GridUsage::Calc,
                        _ => return Err(ctx.err(e.line, format!("NAME: unknown qualifier \"{u}\""))),
                    };
                    (n.clone(), Some(usage))
                }
                _ => return Err(ctx.err(e.line, "NAME: expected <name> [PREP | CALC]")),
            };
            cur = Some(Partial {
                line: e.line,
                name: Some(name),
                usage,
                ..Default::default()
            });
            continue;
        }
        let Some(p) = cur.as_mut() else {
            return Err(ctx.err(e.line, format!("{} found before the first NAME entry", e.key)));
        };
        let s = || ctx.single(&e).map(str::to_string);
        match e.key.as_str() {
            "VTYPE" => match ctx.single(&e)?.to_ascii_lowercase().as_str() {
                "z" => ctx.set_once(&mut p.vtype, &e, ())?,
                "sigma" => return Err(ctx.err(e.line, "sigma vertical coordinates are not supported")),
                other => return Err(ctx.err(e.line, format!("VTYPE: unknown type \"{other}\""))),
            },
            "DATA" => ctx.set_once(&mut p.data, &e, PathBuf::from(s()?))?,
            "XDIMNAME" => ctx.set_once(&mut p.xdim, &e, s()?)?,
            "YDIMNAME" => ctx.set_once(&mut p.ydim, &e, s()?)?,
            "ZDIMNAME" => ctx.set_once(&mut p.zdim, &e, s()?)?,
            "XVARNAME" => ctx.set_once(&mut p.xvar, &e, s()?)?,
            "YVARNAME" => ctx.set_once(&mut p.yvar, &e, s()?)?,
            "ZVARNAME" => ctx.set_once(&mut p.zvar, &e, s()?)?,
            "DEPTHVARNAME" => ctx.set_once(&mut p.depthvar, &e, s()?)?,
            "NUMLEVELSVARNAME" => ctx.set_once(&mut p.numlevelsvar, &e, s()?)?,
            "MASKVARNAME" => return Err(ctx.err(e.line, "MASKVARNAME applies to sigma grids, which are not supported")),
            other => return Err(ctx.err(e.line, format!("unknown entry \"{other}\""))),
        }
    }
    if let Some(p) = cur.take() {
        grids.push(p.finish(&ctx)?);
    }
    if grids.is_empty() {
        return Err(ctx.err(0, "no grids defined"));
    }
    for (k, g) in grids.iter().enumerate() {
        if grids[..k].iter().any(|o| o.name == g.name && o.usage == g.usage) {
            return Err(ctx.err(0, format!("grid \"{}\" defined twice", g.name)));
        }
    }
    Ok(grids)
}

impl GridConfig {
    pub fn to_prm_string(&self) -> String {
        let mut s = String::new();
        match self.usage {
            Some(GridUsage::Prep) => {
                let _ = writeln!(s, "NAME = {} PREP", self.name);
            }
            Some(GridUsage::Calc) => {
                let _ = writeln!(s, "NAME = {} CALC", self.name);
            }
            None => {
                let _ = writeln!(s, "NAME = {}", self.name);
            }
        }
        let _ = writeln!(s, "VTYPE = z");
        let _ = writeln!(s, "DATA = {}", self.data.display());
        for (k, v) in [
            ("XDIMNAME", &self.xdimname),
            ("YDIMNAME", &self.ydimname),
            ("ZDIMNAME", &self.zdimname),
        ] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        let _ = writeln!(s, "XVARNAME = {}", self.xvarname);
        let _ = writeln!(s, "YVARNAME = {}", self.yvarname);
        let _ = writeln!(s, "ZVARNAME = {}", self.zvarname);
        let _ = writeln!(s, "DEPTHVARNAME = {}", self.depthvarname);
        let _ = writeln!(s, "NUMLEVELSVARNAME = {}", self.numlevelsvarname);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const G: &str = "NAME = t-grid\nVTYPE = z\nDATA = grid\nXDIMNAME = xi\nXVARNAME = lon\nYVARNAME = lat\nZVARNAME = z\nDEPTHVARNAME = depth\nNUMLEVELSVARNAME = num_levels\n";

    #[test]
    fn single_grid() {
        let g = parse_grid(G).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].name, "t-grid");
        assert_eq!(g[0].xdimname.as_deref(), Some("xi"));
        assert_eq!(parse_grid(&g[0].to_prm_string()).unwrap(), g);
    }

    #[test]
    fn missing_field() {
        let text = G.replace("DEPTHVARNAME = depth\n", "");
        let e = parse_grid(&text).unwrap_err().to_string();
        assert!(e.contains("DEPTHVARNAME"), "{e}");
    }

    #[test]
    fn sigma_rejected() {
        assert!(parse_grid(&G.replace("VTYPE = z", "VTYPE = sigma")).is_err());
    }

    #[test]
    fn two_blocks() {
        let text = format!("{G}\n{}", G.replace("t-grid", "u-grid"));
        assert_eq!(parse_grid(&text).unwrap().len(), 2);
    }
}
