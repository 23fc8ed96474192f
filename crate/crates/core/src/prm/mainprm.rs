//! Main parameter file.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::lexer::{entries, fmt_f64, intervals, Ctx, Entry};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Enkf,
    Enoi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Scheme {
    #[default]
    Denkf,
    Etkf,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Enkf => "ENKF",
            Mode::Enoi => "ENOI",
        }
    }
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Denkf => "DENKF",
            Scheme::Etkf => "ETKF",
        }
    }
}

/// Inflation cap: either a fraction of the element-wise spread reduction, or none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InflationCap {
    Capped(f64),
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inflation {
    pub mult: f64,
    pub cap: InflationCap,
}

impl Default for Inflation {
    fn default() -> Self {
        Inflation {
            mult: 1.0,
            cap: InflationCap::Capped(0.5),
        }
    }
}

impl Inflation {
    /// Parses `<mult> [<cap> | PLAIN]`; a lone multiple means cap 1.
    pub(crate) fn parse(ctx: &Ctx, e: &Entry) -> Result<Self> {
        let (mult, cap) = match e.tokens.as_slice() {
            [m] => (ctx.f64(e, m)?, InflationCap::Capped(1.0)),
            [m, c] if c.eq_ignore_ascii_case("PLAIN") => (ctx.f64(e, m)?, InflationCap::Plain),
            [m, c] => (ctx.f64(e, m)?, InflationCap::Capped(ctx.f64(e, c)?)),
            _ => return Err(ctx.err(e.line, "INFLATION: expected <mult> [<cap> | PLAIN]")),
        };
        if !(mult >= 1.0) || !mult.is_finite() {
            return Err(ctx.err(e.line, format!("INFLATION: multiple {mult} must be >= 1")));
        }
        if let InflationCap::Capped(c) = cap {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(ctx.err(e.line, format!("INFLATION: cap {c} must be >= 0")));
            }
        }
        Ok(Inflation { mult, cap })
    }

    pub(crate) fn to_prm(self) -> String {
        match self.cap {
            InflationCap::Plain => format!("{} PLAIN", fmt_f64(self.mult)),
            InflationCap::Capped(c) => format!("{} {}", fmt_f64(self.mult), fmt_f64(c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub lon1: f64,
    pub lon2: f64,
    pub lat1: f64,
    pub lat2: f64,
    /// Overrides the common depth intervals when non-empty.
    pub zints: Vec<(f64, f64)>,
}

impl Region {
    pub fn global() -> Self {
        Region {
            name: "Global".into(),
            lon1: -999.0,
            lon2: 999.0,
            lat1: -999.0,
            lat2: 999.0,
            zints: Vec::new(),
        }
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.lon1 && lon <= self.lon2 && lat >= self.lat1 && lat <= self.lat2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointLogSpec {
    pub i: usize,
    pub j: usize,
    pub grid: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BadBatchSpec {
    pub obstype: String,
    pub max_bias: f64,
    pub max_mad: f64,
    pub min_nobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ExitAction {
    #[default]
    Backtrace,
    Segfault,
}

/// Multi-scale localisation: support radii (km) and normalised weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocRad {
    pub radii: Vec<f64>,
    pub weights: Vec<f64>,
}

impl LocRad {
    /// Validates radii and normalises weights to sum to one. Missing weights
    /// mean equal weighting.
    pub fn new(radii: Vec<f64>, weights: Option<Vec<f64>>) -> std::result::Result<Self, String> {
        if radii.is_empty() {
            return Err("LOCRAD: no radii given".into());
        }
        if radii.iter().any(|r| !(*r > 0.0)) {
            return Err("LOCRAD: radii must be positive".into());
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; radii.len()]);
        if weights.len() != radii.len() {
            return Err(format!(
                "LOCRAD has {} entries but WEIGHT has {}",
                radii.len(),
                weights.len()
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err("WEIGHT: weights must be finite and non-negative".into());
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err("WEIGHT: weights sum to zero".into());
        }
        let weights = weights.iter().map(|w| w / sum).collect();
        Ok(LocRad { radii, weights })
    }

    pub fn max_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainConfig {
    pub mode: Mode,
    pub scheme: Scheme,
    pub alpha: f64,
    pub model_prm: PathBuf,
    pub grid_prm: PathBuf,
    pub obstypes_prm: PathBuf,
    pub obs_prm: PathBuf,
    pub date: f64,
    /// Anything following the number on the DATE line, e.g. `days since 1990-01-01`.
    pub date_units: Option<String>,
    pub ensdir: Option<PathBuf>,
    pub bgdir: Option<PathBuf>,
    /// `None` disables adaptive moderation.
    pub kfactor: Option<f64>,
    pub rfactor: f64,
    /// `None` means no localisation.
    pub locrad: Option<LocRad>,
    pub stride: usize,
    pub sobstride: usize,
    pub fieldbuffersize: usize,
    pub inflation: Inflation,
    pub zstatints: Vec<(f64, f64)>,
    pub regions: Vec<Region>,
    pub pointlogs: Vec<PointLogSpec>,
    pub exitaction: ExitAction,
    pub badbatches: Vec<BadBatchSpec>,
}

pub fn parse_main(text: &str) -> Result<MainConfig> {
    parse_main_named(text, "main parameter file")
}

pub fn parse_main_named(text: &str, source_name: &str) -> Result<MainConfig> {
    let ctx = Ctx { source_name };
    let mut mode = None;
    let mut scheme = None;
    let mut alpha = None;
    let mut model = None;
    let mut grid = None;
    let mut obstypes = None;
    let mut obs = None;
    let mut date: Option<(f64, Option<String>)> = None;
    let mut ensdir = None;
    let mut bgdir = None;
    let mut kfactor: Option<Option<f64>> = None;
    let mut rfactor = None;
    let mut locrad: Option<(usize, Vec<f64>)> = None;
    let mut weight: Option<(usize, Vec<f64>)> = None;
    let mut stride = None;
    let mut sobstride = None;
    let mut fieldbuffersize = None;
    let mut inflation = None;
    let mut exitaction = None;
    let mut zstatints = Vec::new();
    let mut regions = Vec::new();
    let mut pointlogs = Vec::new();
    let mut badbatches = Vec::new();

    for e in entries(text, source_name)? {
        match e.key.as_str() {
            "MODE" => {
                let v = match ctx.single(&e)?.to_ascii_uppercase().as_str() {
                    "ENKF" => Mode::Enkf,
                    "ENOI" => Mode::Enoi,
                    other => return Err(ctx.err(e.line, format!("MODE: unknown mode \"{other}\""))),
                };
                ctx.set_once(&mut mode, &e, v)?;
            }
            "SCHEME" => {
                let v = match ctx.single(&e)?.to_ascii_uppercase().as_str() {
                    "DENKF" => Scheme::Denkf,
                    "ETKF" => Scheme::Etkf,
                    other => return Err(ctx.err(e.line, format!("SCHEME: unknown scheme \"{other}\""))),
                };
                ctx.set_once(&mut scheme, &e, v)?;
            }
            "ALPHA" => {
                let v = ctx.f64(&e, ctx.single(&e)?)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(ctx.err(e.line, format!("ALPHA = {v} is outside [0, 1]")));
                }
                ctx.set_once(&mut alpha, &e, v)?;
            }
            "MODEL" => ctx.set_once(&mut model, &e, PathBuf::from(ctx.single(&e)?))?,
            "GRID" => ctx.set_once(&mut grid, &e, PathBuf::from(ctx.single(&e)?))?,
            "OBSTYPES" => ctx.set_once(&mut obstypes, &e, PathBuf::from(ctx.single(&e)?))?,
            "OBS" => ctx.set_once(&mut obs, &e, PathBuf::from(ctx.single(&e)?))?,
            "DATE" => {
                let first = e
                    .tokens
                    .first()
                    .ok_or_else(|| ctx.err(e.line, "DATE: missing value"))?;
                let d = ctx.f64(&e, first)?;
                let units = if e.tokens.len() > 1 {
                    Some(e.tokens[1..].join(" "))
                } else {
                    None
                };
                ctx.set_once(&mut date, &e, (d, units))?;
            }
            "ENSDIR" => ctx.set_once(&mut ensdir, &e, PathBuf::from(ctx.single(&e)?))?,
            "BGDIR" => ctx.set_once(&mut bgdir, &e, PathBuf::from(ctx.single(&e)?))?,
            "KFACTOR" => {
                let v = ctx.f64(&e, ctx.single(&e)?)?;
                let v = if v.is_nan() {
                    None
                } else if v > 0.0 {
                    Some(v)
                } else {
                    return Err(ctx.err(e.line, format!("KFACTOR = {v} must be positive")));
                };
                ctx.set_once(&mut kfactor, &e, v)?;
            }
            "RFACTOR" => {
                let v = ctx.f64(&e, ctx.single(&e)?)?;
                if !(v > 0.0) {
                    return Err(ctx.err(e.line, format!("RFACTOR = {v} must be positive")));
                }
                ctx.set_once(&mut rfactor, &e, v)?;
            }
            "LOCRAD" => {
                let v = ctx.list_f64(&e)?;
                ctx.set_once(&mut locrad, &e, (e.line, v))?;
            }
            "WEIGHT" => {
                let v = ctx.list_f64(&e)?;
                ctx.set_once(&mut weight, &e, (e.line, v))?;
            }
            "STRIDE" => {
                let v = ctx.usize(&e, ctx.single(&e)?)?;
                if v < 1 {
                    return Err(ctx.err(e.line, "STRIDE must be >= 1"));
                }
                ctx.set_once(&mut stride, &e, v)?;
            }
            "SOBSTRIDE" => {
                let v = ctx.usize(&e, ctx.single(&e)?)?;
                ctx.set_once(&mut sobstride, &e, v)?;
            }
            "FIELDBUFFERSIZE" => {
                let v = ctx.usize(&e, ctx.single(&e)?)?;
                ctx.set_once(&mut fieldbuffersize, &e, v)?;
            }
            "INFLATION" => {
                let v = Inflation::parse(&ctx, &e)?;
                ctx.set_once(&mut inflation, &e, v)?;
            }
            "ZSTATINTS" => zstatints.extend(intervals(&ctx, &e, &e.tokens)?),
            "REGION" => {
                if e.tokens.len() < 5 {
                    return Err(ctx.err(e.line, "REGION: expected <name> <lon1> <lon2> <lat1> <lat2> [[<z1> <z2>] ...]"));
                }
                let r = Region {
                    name: e.tokens[0].clone(),
                    lon1: ctx.f64(&e, &e.tokens[1])?,
                    lon2: ctx.f64(&e, &e.tokens[2])?,
                    lat1: ctx.f64(&e, &e.tokens[3])?,
                    lat2: ctx.f64(&e, &e.tokens[4])?,
                    zints: intervals(&ctx, &e, &e.tokens[5..])?,
                };
                if !(r.lon1 <= r.lon2 && r.lat1 <= r.lat2) {
                    return Err(ctx.err(e.line, format!("REGION {}: bounds are inverted", r.name)));
                }
                regions.push(r);
            }
            "POINTLOG" => {
                if !(2..=3).contains(&e.tokens.len()) {
                    return Err(ctx.err(e.line, "POINTLOG: expected <i> <j> [grid name]"));
                }
                pointlogs.push(PointLogSpec {
                    i: ctx.usize(&e, &e.tokens[0])?,
                    j: ctx.usize(&e, &e.tokens[1])?,
                    grid: e.tokens.get(2).cloned(),
                });
            }
            "EXITACTION" => {
                let v = match ctx.single(&e)?.to_ascii_uppercase().as_str() {
                    "BACKTRACE" => ExitAction::Backtrace,
                    "SEGFAULT" => ExitAction::Segfault,
                    other => return Err(ctx.err(e.line, format!("EXITACTION: unknown action \"{other}\""))),
                };
                ctx.set_once(&mut exitaction, &e, v)?;
            }
            "BADBATCHES" => {
                if e.tokens.len() != 4 {
                    return Err(ctx.err(
                        e.line,
                        "BADBATCHES: expected <obstype> <max. bias> <max. mad> <min # obs.>",
                    ));
                }
                badbatches.push(BadBatchSpec {
                    obstype: e.tokens[0].clone(),
                    max_bias: ctx.f64(&e, &e.tokens[1])?,
                    max_mad: ctx.f64(&e, &e.tokens[2])?,
                    min_nobs: ctx.usize(&e, &e.tokens[3])?,
                });
            }
            other => return Err(ctx.err(e.line, format!("unknown entry \"{other}\""))),
        }
    }

    let missing = |what: &str| ctx.err(0, format!("{what} not specified"));
    let mode = mode.ok_or_else(|| missing("MODE"))?;
    let model_prm = model.ok_or_else(|| missing("MODEL"))?;
    let grid_prm = grid.ok_or_else(|| missing("GRID"))?;
    let obstypes_prm = obstypes.ok_or_else(|| missing("OBSTYPES"))?;
    let obs_prm = obs.ok_or_else(|| missing("OBS"))?;
    let (date, date_units) = date.ok_or_else(|| missing("DATE"))?;
    if mode == Mode::Enkf && ensdir.is_none() {
        return Err(missing("ENSDIR"));
    }
    if mode == Mode::Enoi && bgdir.is_none() {
        return Err(ctx.err(0, "BGDIR required for ENOI"));
    }
    let locrad = match (locrad, weight) {
        (Some((_, radii)), w) => {
            let line = w.as_ref().map(|(l, _)| *l).unwrap_or(0);
            Some(LocRad::new(radii, w.map(|(_, v)| v)).map_err(|m| ctx.err(line, m))?)
        }
        (None, Some((line, _))) => return Err(ctx.err(line, "WEIGHT given without LOCRAD")),
        (None, None) => None,
    };

    Ok(MainConfig {
        mode,
        scheme: scheme.unwrap_or_default(),
        alpha: alpha.unwrap_or(1.0),
        model_prm,
        grid_prm,
        obstypes_prm,
        obs_prm,
        date,
        date_units,
        ensdir,
        bgdir,
        kfactor: kfactor.flatten(),
        rfactor: rfactor.unwrap_or(1.0),
        locrad,
        stride: stride.unwrap_or(1),
        sobstride: sobstride.unwrap_or(1),
        fieldbuffersize: fieldbuffersize.unwrap_or(1),
        inflation: inflation.unwrap_or_default(),
        zstatints,
        regions,
        pointlogs,
        exitaction: exitaction.unwrap_or_default(),
        badbatches,
    })
}

impl MainConfig {
    /// Default depth intervals for statistics when none are given.
    pub fn effective_zstatints(&self) -> Vec<(f64, f64)> {
        if self.zstatints.is_empty() {
            vec![(0.0, 50.0), (50.0, 500.0), (500.0, f64::INFINITY)]
        } else {
            self.zstatints.clone()
        }
    }

    pub fn effective_regions(&self) -> Vec<Region> {
        if self.regions.is_empty() {
            vec![Region::global()]
        } else {
            self.regions.clone()
        }
    }

    /// Canonical `KEY = value` form.
    pub fn to_prm_string(&self) -> String {
        let mut s = String::new();
        let p = |p: &PathBuf| p.display().to_string();
        let _ = writeln!(s, "MODE = {}", self.mode.as_str());
        let _ = writeln!(s, "SCHEME = {}", self.scheme.as_str());
        let _ = writeln!(s, "ALPHA = {}", fmt_f64(self.alpha));
        let _ = writeln!(s, "MODEL = {}", p(&self.model_prm));
        let _ = writeln!(s, "GRID = {}", p(&self.grid_prm));
        let _ = writeln!(s, "OBSTYPES = {}", p(&self.obstypes_prm));
        let _ = writeln!(s, "OBS = {}", p(&self.obs_prm));
        match &self.date_units {
            Some(u) => {
                let _ = writeln!(s, "DATE = {} {}", fmt_f64(self.date), u);
            }
            None => {
                let _ = writeln!(s, "DATE = {}", fmt_f64(self.date));
            }
        }
        if let Some(d) = &self.ensdir {
            let _ = writeln!(s, "ENSDIR = {}", p(d));
        }
        if let Some(d) = &self.bgdir {
            let _ = writeln!(s, "BGDIR = {}", p(d));
        }
        match self.kfactor {
            Some(k) => {
                let _ = writeln!(s, "KFACTOR = {}", fmt_f64(k));
            }
            None => {
                let _ = writeln!(s, "KFACTOR = NaN");
            }
        }
        let _ = writeln!(s, "RFACTOR = {}", fmt_f64(self.rfactor));
        if let Some(l) = &self.locrad {
            let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" ");
            let _ = writeln!(s, "LOCRAD = {}", join(&l.radii));
            let _ = writeln!(s, "WEIGHT = {}", join(&l.weights));
        }
        let _ = writeln!(s, "STRIDE = {}", self.stride);
        let _ = writeln!(s, "SOBSTRIDE = {}", self.sobstride);
        let _ = writeln!(s, "FIELDBUFFERSIZE = {}", self.fieldbuffersize);
        let _ = writeln!(s, "INFLATION = {}", self.inflation.to_prm());
        for (z1, z2) in &self.zstatints {
            let _ = writeln!(s, "ZSTATINTS = [{} {}]", fmt_f64(*z1), fmt_f64(*z2));
        }
        for r in &self.regions {
            let mut line = format!(
                "REGION = {} {} {} {} {}",
                r.name,
                fmt_f64(r.lon1),
                fmt_f64(r.lon2),
                fmt_f64(r.lat1),
                fmt_f64(r.lat2)
            );
            for (z1, z2) in &r.zints {
                let _ = write!(line, " [{} {}]", fmt_f64(*z1), fmt_f64(*z2));
            }
            let _ = writeln!(s, "{line}");
        }
        for pl in &self.pointlogs {
            match &pl.grid {
                Some(g) => {
                    let _ = writeln!(s, "POINTLOG = {} {} {}", pl.i, pl.j, g);
                }
                None => {
                    let _ = writeln!(s, "POINTLOG = {} {}", pl.i, pl.j);
                }
            }
        }
        let _ = writeln!(
            s,
            "EXITACTION = {}",
            match self.exitaction {
                ExitAction::Backtrace => "BACKTRACE",
                ExitAction::Segfault => "SEGFAULT",
            }
        );
        for b in &self.badbatches {
            let _ = writeln!(
                s,
                "BADBATCHES = {} {} {} {}",
                b.obstype,
                fmt_f64(b.max_bias),
                fmt_f64(b.max_mad),
                b.min_nobs
            );
        }
        s
    }
}
