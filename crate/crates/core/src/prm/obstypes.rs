//! Observation types parameter file.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::lexer::{entries, fmt_f64, parse_yes_no, Ctx, Entry};
use super::mainprm::LocRad;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsTypeSpec {
    pub name: String,
    pub var: String,
    /// Bias field subtracted from the forecast observation.
    pub var2: Option<String>,
    pub issurface: bool,
    /// `(file, variable)` of a field added to observations.
    pub offset: Option<(PathBuf, String)>,
    pub hfunction: String,
    /// Time-slot width in days for asynchronous types.
    pub async_interval: Option<f64>,
    /// Overrides the main-file localisation when present.
    pub locrad: Option<LocRad>,
    pub rfactor: f64,
    pub minvalue: f64,
    pub maxvalue: f64,
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub zmin: f64,
    pub zmax: f64,
}

impl ObsTypeSpec {
    pub fn new(name: &str, var: &str, issurface: bool) -> Self {
        ObsTypeSpec {
            name: name.to_string(),
            var: var.to_string(),
            var2: None,
            issurface,
            offset: None,
            hfunction: "standard".into(),
            async_interval: None,
            locrad: None,
            rfactor: 1.0,
            minvalue: f64::NEG_INFINITY,
            maxvalue: f64::INFINITY,
            xmin: f64::NEG_INFINITY,
            xmax: f64::INFINITY,
            ymin: f64::NEG_INFINITY,
            ymax: f64::INFINITY,
            zmin: f64::NEG_INFINITY,
            zmax: f64::INFINITY,
        }
    }

    pub fn is_async(&self) -> bool {
        self.async_interval.is_some()
    }

    pub fn within_bounds(&self, lon: f64, lat: f64, depth: f64) -> bool {
        lon >= self.xmin
            && lon <= self.xmax
            && lat >= self.ymin
            && lat <= self.ymax
            && (self.issurface || (depth >= self.zmin && depth <= self.zmax))
    }
}

#[derive(Default)]
struct Partial {
    line: usize,
    name: String,
    var: Option<String>,
    var2: Option<String>,
    issurface: Option<bool>,
    offset: Option<(PathBuf, String)>,
    hfunction: Option<String>,
    async_interval: Option<f64>,
    locrad: Option<Vec<f64>>,
    weight: Option<Vec<f64>>,
    rfactor: Option<f64>,
    bounds: [Option<f64>; 8],
}

const BOUND_KEYS: [&str; 8] = ["MINVALUE", "MAXVALUE", "XMIN", "XMAX", "YMIN", "YMAX", "ZMIN", "ZMAX"];

impl Partial {
    fn finish(self, ctx: &Ctx) -> Result<ObsTypeSpec> {
        let name = self.name;
        let need = |what: &str| ctx.err(self.line, format!("obs type \"{name}\": {what} not specified"));
        let var = self.var.ok_or_else(|| need("VAR"))?;
        let issurface = self.issurface.ok_or_else(|| need("ISSURFACE"))?;
        let hfunction = self.hfunction.ok_or_else(|| need("HFUNCTION"))?;
        let locrad = match (self.locrad, self.weight) {
            (Some(r), w) => Some(LocRad::new(r, w).map_err(|m| ctx.err(self.line, format!("obs type \"{name}\": {m}")))?),
            (None, Some(_)) => return Err(ctx.err(self.line, format!("obs type \"{name}\": WEIGHT given without LOCRAD"))),
            (None, None) => None,
        };
        let b = |k: usize, def: f64| self.bounds[k].unwrap_or(def);
        Ok(ObsTypeSpec {
            var,
            var2: self.var2,
            issurface,
            offset: self.offset,
            hfunction,
            async_interval: self.async_interval,
            locrad,
            rfactor: self.rfactor.unwrap_or(1.0),
            minvalue: b(0, f64::NEG_INFINITY),
            maxvalue: b(1, f64::INFINITY),
            xmin: b(2, f64::NEG_INFINITY),
            xmax: b(3, f64::INFINITY),
            ymin: b(4, f64::NEG_INFINITY),
            ymax: b(5, f64::INFINITY),
            zmin: b(6, f64::NEG_INFINITY),
            zmax: b(7, f64::INFINITY),
            name,
        })
    }
}

fn apply(ctx: &Ctx, p: &mut Partial, e: &Entry) -> Result<()> {
    let s = || ctx.single(e).map(str::to_string);
    match e.key.as_str() {
        "VAR" => ctx.set_once(&mut p.var, e, s()?),
        "VAR2" => ctx.set_once(&mut p.var2, e, s()?),
        "ISSURFACE" => {
            let v = parse_yes_no(ctx.single(e)?)
                .ok_or_else(|| ctx.err(e.line, "ISSURFACE: expected yes or no"))?;
            ctx.set_once(&mut p.issurface, e, v)
        }
        "OFFSET" => {
            let [f, v] = e.tokens.as_slice() else {
                return Err(ctx.err(e.line, "OFFSET: expected <file name> <variable name>"));
            };
            ctx.set_once(&mut p.offset, e, (PathBuf::from(f), v.clone()))
        }
        "HFUNCTION" => ctx.set_once(&mut p.hfunction, e, s()?),
        "ASYNC" => {
            let v = ctx.f64(e, ctx.single(e)?)?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(ctx.err(e.line, format!("ASYNC = {v} must be positive")));
            }
            ctx.set_once(&mut p.async_interval, e, v)
        }
        "LOCRAD" => {
            let v = ctx.list_f64(e)?;
            ctx.set_once(&mut p.locrad, e, v)
        }
        "WEIGHT" => {
            let v = ctx.list_f64(e)?;
            ctx.set_once(&mut p.weight, e, v)
        }
        "RFACTOR" => {
            let v = ctx.f64(e, ctx.single(e)?)?;
            if !(v > 0.0) {
                return Err(ctx.err(e.line, format!("RFACTOR = {v} must be positive")));
            }
            ctx.set_once(&mut p.rfactor, e, v)
        }
        k => match BOUND_KEYS.iter().position(|b| *b == k) {
            Some(idx) => {
                let v = ctx.f64(e, ctx.single(e)?)?;
                ctx.set_once(&mut p.bounds[idx], e, v)
            }
            None => Err(ctx.err(e.line, format!("unknown entry \"{k}\""))),
        },
    }
}

pub fn parse_obstypes(text: &str) -> Result<Vec<ObsTypeSpec>> {
    let ctx = Ctx {
        source_name: "observation types parameter file",
    };
    let mut out: Vec<ObsTypeSpec> = Vec::new();
    let mut cur: Option<Partial> = None;
    for e in entries(text, ctx.source_name)? {
        if e.key == "NAME" {
            if let Some(p) = cur.take() {
                out.push(p.finish(&ctx)?);
            }
            let name = ctx.single(&e)?.to_string();
            if out.iter().any(|t| t.name == name) {
                return Err(ctx.err(e.line, format!("obs type \"{name}\" defined twice")));
            }
            cur = Some(Partial {
                line: e.line,
                name,
                ..Default::default()
            });
            continue;
        }
        let Some(p) = cur.as_mut() else {
            return Err(ctx.err(e.line, format!("{} found before the first NAME entry", e.key)));
        };
        apply(&ctx, p, &e)?;
    }
    if let Some(p) = cur.take() {
        out.push(p.finish(&ctx)?);
    }
    Ok(out)
}

pub fn obstypes_to_prm_string(types: &[ObsTypeSpec]) -> String {
    let mut s = String::new();
    for t in types {
        let _ = writeln!(s, "NAME = {}", t.name);
        let _ = writeln!(s, "VAR = {}", t.var);
        if let Some(v) = &t.var2 {
            let _ = writeln!(s, "VAR2 = {v}");
        }
        let _ = writeln!(s, "ISSURFACE = {}", if t.issurface { "yes" } else { "no" });
        if let Some((f, v)) = &t.offset {
            let _ = writeln!(s, "OFFSET = {} {}", f.display(), v);
        }
        let _ = writeln!(s, "HFUNCTION = {}", t.hfunction);
        if let Some(a) = t.async_interval {
            let _ = writeln!(s, "ASYNC = {}", fmt_f64(a));
        }
        if let Some(l) = &t.locrad {
            let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ");
            let _ = writeln!(s, "LOCRAD = {}", join(&l.radii));
            let _ = writeln!(s, "WEIGHT = {}", join(&l.weights));
        }
        let _ = writeln!(s, "RFACTOR = {}", fmt_f64(t.rfactor));
        let vals = [t.minvalue, t.maxvalue, t.xmin, t.xmax, t.ymin, t.ymax, t.zmin, t.zmax];
        for (k, v) in BOUND_KEYS.iter().zip(vals) {
            if v.is_finite() {
                let _ = writeln!(s, "{k} = {}", fmt_f64(v));
            }
        }
        s.push('\n');
    }
    s
}
