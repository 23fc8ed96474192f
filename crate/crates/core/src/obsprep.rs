//! Observation preprocessing: raw measurements to the observation table,
//! error-std combination, offsets, time slots, superobing and bad batches.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geo::Grid;
use crate::io::{read_array, ObsStatus, Observation};
use crate::prm::{DaConfig, ErrorStdEntry, ErrorStdOp, ErrorStdSource, ObsDataSection, ObsTypeSpec};

/// Name of the bad-batch report picked up by `prep`.
pub const BADBATCH_FILE: &str = "badbatches.out";

/// One step of the running error-std combination.
pub fn combine_error_std(sigma: f64, op: ErrorStdOp, now: f64) -> Result<f64> {
    if !(now > 0.0) || !now.is_finite() {
        return Err(Error::InvalidArgument(format!("error std value {now} must be positive")));
    }
    Ok(match op {
        ErrorStdOp::Equal => now,
        ErrorStdOp::Plus => (sigma * sigma + now * now).sqrt(),
        ErrorStdOp::Mult => sigma * now,
        ErrorStdOp::Min => sigma.max(now),
        ErrorStdOp::Max => sigma.min(now),
    })
}

/// Applies `(op, value)` pairs in order to a starting std (0 when the reader
/// gave none).
pub fn apply_error_std(start: Option<f64>, steps: &[(ErrorStdOp, f64)]) -> Result<f64> {
    let mut s = start.filter(|v| v.is_finite()).unwrap_or(0.0);
    for &(op, now) in steps {
        s = combine_error_std(s, op, now)?;
    }
    Ok(s)
}

/// Time slot of an observation; slot 0 is the bin centred on the
/// assimilation date, bins are closed on the left.
pub fn assign_slot(time: f64, date: f64, interval: f64) -> i32 {
    ((time - date) / interval + 0.5).floor() as i32
}

/// Slot of an observation of the given type; synchronous types use slot 0.
pub fn slot_of(o: &Observation, t: &ObsTypeSpec, date: f64) -> i32 {
    match t.async_interval {
        Some(iv) if iv > 0.0 => assign_slot(o.time, date, iv),
        _ => 0,
    }
}

/// Interpolates a surface or volume field, chosen by its length, at an
/// observation location.
pub fn interp_at(grid: &Grid, field: &[f64], fi: f64, fj: f64, fk: f64) -> Result<f64> {
    if field.len() == grid.ni * grid.nj {
        grid.h_surface(field, fi, fj)
    } else {
        grid.h_volume(field, fi, fj, fk)
    }
}

/// Adds the offset field value at each observation location; observations
/// where it is undefined become BAD.
pub fn apply_offset(obs: &mut [Observation], offset: &[f64], grid: &Grid) -> Result<()> {
    for o in obs.iter_mut().filter(|o| o.is_good()) {
        match interp_at(grid, offset, o.fi, o.fj, o.fk) {
            Ok(v) => o.value += v,
            Err(Error::OnLand | Error::InvalidArgument(_)) => o.status = ObsStatus::Bad,
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Raw measurement row of the built-in `csv` reader.
#[derive(Debug, Clone, Deserialize)]
struct RawRow {
    lon: f64,
    lat: f64,
    #[serde(default)]
    depth: Option<f64>,
    value: f64,
    #[serde(default)]
    time: Option<f64>,
    #[serde(default)]
    std: Option<f64>,
    #[serde(default)]
    instrument: Option<String>,
    #[serde(default)]
    batch: Option<i64>,
}

/// A measurement before positioning, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub lon: f64,
    pub lat: f64,
    pub depth: f64,
    pub value: f64,
    pub time: f64,
    pub std: Option<f64>,
    pub instrument: Option<String>,
    pub batch: i64,
    pub file: PathBuf,
    pub line: usize,
}

/// Reads a CSV measurement file with columns `lon,lat,value` and optional
/// `depth,time,std,instrument,batch`. Missing times default to `date`.
pub fn read_csv_measurements(path: &Path, date: f64) -> Result<Vec<Measurement>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (k, row) in r.deserialize::<RawRow>().enumerate() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        out.push(Measurement {
            lon: row.lon,
            lat: row.lat,
            depth: row.depth.unwrap_or(0.0),
            value: row.value,
            time: row.time.unwrap_or(date),
            std: row.std,
            instrument: row.instrument.filter(|s| !s.is_empty()),
            batch: row.batch.unwrap_or(0),
            file: path.to_path_buf(),
            line: k + 2,
        });
    }
    Ok(out)
}

/// Files matching the section's patterns, sorted; unmatched patterns are
/// logged and skipped.
pub fn expand_files(section: &ObsDataSection, workdir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for pat in &section.files {
        let full = crate::prm::resolve(workdir, Path::new(pat));
        let s = full.to_string_lossy();
        let mut hits: Vec<PathBuf> = glob::glob(&s)
            .map_err(|e| Error::Config(format!("product {}: bad FILE pattern \"{pat}\": {e}", section.product)))?
            .filter_map(|p| p.ok())
            .collect();
        if hits.is_empty() {
            log::warn!("product {}: no files match \"{pat}\"", section.product);
        }
        hits.sort();
        out.extend(hits);
    }
    Ok(out)
}

/// Loads a field referenced from a parameter file: the path itself when it
/// names a file, else `<path>/<varname>.ekc`.
pub fn load_field(workdir: &Path, path: &Path, varname: &str) -> Result<Vec<f64>> {
    let p = crate::prm::resolve(workdir, path);
    let p = if p.is_dir() { p.join(format!("{varname}.ekc")) } else { p };
    Ok(read_array(&p)?.to_f64())
}

/// Positions an observation on the grid and checks bounds; returns the
/// status it should take.
fn locate(o: &mut Observation, t: &ObsTypeSpec, grid: &Grid) -> ObsStatus {
    if !t.within_bounds(o.lon, o.lat, o.depth) {
        return ObsStatus::Outside;
    }
    let Some((fi, fj)) = grid.xy_to_fij(o.lon, o.lat) else {
        return ObsStatus::Outside;
    };
    o.fi = fi;
    o.fj = fj;
    o.fk = if t.issurface { 0.0 } else { grid.z_to_fk(o.depth) };
    let k = if t.issurface { 0 } else { (o.fk + 0.5).floor() as usize };
    match grid.horizontal_weights(fi, fj, k.min(grid.nk - 1)) {
        Ok(_) => ObsStatus::Good,
        Err(_) => ObsStatus::Outside,
    }
}

fn error_std_steps(
    entries: &[ErrorStdEntry],
    fields: &[Option<Vec<f64>>],
    grid: &Grid,
    o: &Observation,
) -> Result<Option<Vec<(ErrorStdOp, f64)>>> {
    let mut steps = Vec::with_capacity(entries.len());
    for (e, f) in entries.iter().zip(fields) {
        let v = match (&e.source, f) {
            (ErrorStdSource::Const(c), _) => *c,
            (ErrorStdSource::File { .. }, Some(field)) => match interp_at(grid, field, o.fi, o.fj, o.fk) {
                Ok(v) => v,
                Err(Error::OnLand | Error::InvalidArgument(_)) => return Ok(None),
                Err(err) => return Err(err),
            },
            (ErrorStdSource::File { .. }, None) => unreachable!("file fields are loaded up front"),
        };
        steps.push((e.op, v));
    }
    Ok(Some(steps))
}

/// Reads all products, positions and checks every measurement, and returns
/// the full observation table (ids in reading order).
pub fn read_observations(cfg: &DaConfig, grid: &Grid) -> Result<Vec<Observation>> {
    let mut out: Vec<Observation> = Vec::new();
    let mut offsets: HashMap<String, Vec<f64>> = HashMap::new();
    for t in &cfg.obstypes {
        if let Some((file, var)) = &t.offset {
            offsets.insert(t.name.clone(), load_field(&cfg.workdir, file, var)?);
        }
    }
    for section in &cfg.obsdata {
        if !section.reader.eq_ignore_ascii_case("csv") {
            return Err(Error::Config(format!(
                "product {}: unknown reader \"{}\" (only \"csv\" is built in)",
                section.product, section.reader
            )));
        }
        let t = cfg
            .obstype(&section.obstype)
            .ok_or_else(|| Error::Config(format!("unknown observation type {}", section.obstype)))?;
        let fields: Vec<Option<Vec<f64>>> = section
            .error_std
            .iter()
            .map(|e| match &e.source {
                ErrorStdSource::Const(_) => Ok(None),
                ErrorStdSource::File { path, varname } => load_field(&cfg.workdir, path, varname).map(Some),
            })
            .collect::<Result<_>>()?;
        for file in expand_files(section, &cfg.workdir)? {
            let ms = read_csv_measurements(&file, cfg.main.date)?;
            log::info!("  {}: {} measurements from {}", section.product, ms.len(), file.display());
            for m in ms {
                let mut o = Observation {
                    id: out.len(),
                    obstype: t.name.clone(),
                    product: section.product.clone(),
                    instrument: m.instrument.clone().unwrap_or_else(|| section.product.clone()),
                    batch: m.batch,
                    lon: m.lon,
                    lat: m.lat,
                    depth: if t.issurface { 0.0 } else { m.depth },
                    fi: f64::NAN,
                    fj: f64::NAN,
                    fk: f64::NAN,
                    value: m.value,
                    std: m.std.unwrap_or(f64::NAN),
                    time: m.time,
                    status: ObsStatus::Good,
                };
                o.status = locate(&mut o, t, grid);
                if o.status == ObsStatus::Good {
                    match error_std_steps(&section.error_std, &fields, grid, &o)? {
                        Some(steps) => match apply_error_std(m.std, &steps) {
                            Ok(s) if s > 0.0 && s.is_finite() => o.std = s,
                            _ => o.status = ObsStatus::Bad,
                        },
                        None => o.status = ObsStatus::Bad,
                    }
                }
                if o.status == ObsStatus::Good && !(o.std > 0.0) {
                    o.status = ObsStatus::Bad;
                }
                if o.status == ObsStatus::Good {
                    if let Some(off) = offsets.get(&t.name) {
                        apply_offset(std::slice::from_mut(&mut o), off, grid)?;
                    }
                }
                if o.status == ObsStatus::Good && !(o.value >= t.minvalue && o.value <= t.maxvalue) {
                    o.status = ObsStatus::Bad;
                }
                out.push(o);
            }
        }
    }
    Ok(out)
}

/// `(type, batch)` pairs of a bad-batch report.
pub fn read_badbatch_keys(path: &Path) -> Result<HashSet<(String, i64)>> {
    Ok(crate::diag::read_badbatch_report(path)?
        .into_iter()
        .map(|r| (r.obstype, r.batch))
        .collect())
}

/// Marks every observation whose `(type, batch)` is listed as BAD.
pub fn mark_bad_batches(obs: &mut [Observation], bad: &HashSet<(String, i64)>) -> usize {
    let mut n = 0;
    for o in obs.iter_mut() {
        if o.is_good() && bad.contains(&(o.obstype.clone(), o.batch)) {
            o.status = ObsStatus::Bad;
            n += 1;
        }
    }
    n
}

/// Superobservations with the ids of the observations merged into each.
#[derive(Debug, Clone, PartialEq)]
pub struct Superobs {
    pub obs: Vec<Observation>,
    pub members: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct MergeKey {
    obstype: usize,
    slot: i32,
    ci: i64,
    cj: i64,
    layer: i64,
}

/// Merges GOOD observations sharing `(type, slot, cell, layer)` with
/// inverse-variance weights; averaging of positions is done in fractional
/// index space. `sobstride = 0` passes GOOD observations through unchanged.
pub fn superob(obs: &[Observation], cfg: &DaConfig, grid: &Grid, sobstride: usize, consider_subgrid: bool) -> Result<Superobs> {
    let good: Vec<&Observation> = obs.iter().filter(|o| o.is_good()).collect();
    if sobstride == 0 {
        return Ok(Superobs {
            obs: good.iter().map(|o| (*o).clone()).collect(),
            members: good.iter().map(|o| vec![o.id]).collect(),
        });
    }
    let sob = sobstride as f64;
    let mut index: HashMap<MergeKey, usize> = HashMap::new();
    let mut groups: Vec<Vec<&Observation>> = Vec::new();
    for o in good {
        let ti = cfg
            .obstype_index(&o.obstype)
            .ok_or_else(|| Error::Config(format!("unknown observation type {}", o.obstype)))?;
        let t = &cfg.obstypes[ti];
        let key = MergeKey {
            obstype: ti,
            slot: slot_of(o, t, cfg.main.date),
            ci: (o.fi / sob).floor() as i64,
            cj: (o.fj / sob).floor() as i64,
            layer: if t.issurface { 0 } else { (o.fk + 0.5).floor() as i64 },
        };
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(o);
    }
    let mut out = Superobs {
        obs: Vec::with_capacity(groups.len()),
        members: Vec::with_capacity(groups.len()),
    };
    for (id, g) in groups.into_iter().enumerate() {
        let mut so = merge(&g, grid, consider_subgrid);
        so.id = id;
        out.members.push(g.iter().map(|o| o.id).collect());
        out.obs.push(so);
    }
    Ok(out)
}

fn merge(g: &[&Observation], grid: &Grid, consider_subgrid: bool) -> Observation {
    let first = g[0];
    if g.len() == 1 {
        return first.clone();
    }
    let wsum: f64 = g.iter().map(|o| 1.0 / (o.std * o.std)).sum();
    let avg = |f: fn(&Observation) -> f64| g.iter().map(|o| f(o) / (o.std * o.std)).sum::<f64>() / wsum;
    let value = avg(|o| o.value);
    let fi = avg(|o| o.fi);
    let fj = avg(|o| o.fj);
    let (lon, lat) = grid.fij_to_xy(fi, fj);
    let mut std = (1.0 / wsum).sqrt();
    if consider_subgrid {
        let n = g.len() as f64;
        let mean = g.iter().map(|o| o.value).sum::<f64>() / n;
        let sd = (g.iter().map(|o| (o.value - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        std = std.max(sd);
    }
    let common = |f: fn(&Observation) -> &str| {
        if g.iter().all(|o| f(o) == f(first)) {
            f(first).to_string()
        } else {
            "-1".to_string()
        }
    };
    Observation {
        id: first.id,
        obstype: first.obstype.clone(),
        product: common(|o| &o.product),
        instrument: common(|o| &o.instrument),
        batch: if g.iter().all(|o| o.batch == first.batch) { first.batch } else { -1 },
        lon,
        lat,
        depth: avg(|o| o.depth),
        fi,
        fj,
        fk: avg(|o| o.fk),
        value,
        std,
        time: avg(|o| o.time),
        status: ObsStatus::Good,
    }
}

/// Human-readable composition of one superobservation.
pub fn describe_superob(sobs: &Superobs, orig: &[Observation], id: usize) -> Result<String> {
    let so = sobs
        .obs
        .get(id)
        .ok_or_else(|| Error::InvalidArgument(format!("no superobservation {id} (have {})", sobs.obs.len())))?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "superobservation {id}: type {} value {} std {} lon {} lat {} depth {} fi {} fj {} fk {} time {} from {} observations:",
        so.obstype,
        so.value,
        so.std,
        so.lon,
        so.lat,
        so.depth,
        so.fi,
        so.fj,
        so.fk,
        so.time,
        sobs.members[id].len()
    );
    for &m in &sobs.members[id] {
        let o = orig
            .iter()
            .find(|o| o.id == m)
            .ok_or_else(|| Error::InvalidArgument(format!("observation {m} is not in the original table")))?;
        let _ = writeln!(
            s,
            "  id {} product {} instrument {} batch {} lon {} lat {} depth {} value {} std {} time {}",
            o.id, o.product, o.instrument, o.batch, o.lon, o.lat, o.depth, o.value, o.std, o.time
        );
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrepOptions {
    pub consider_subgrid: bool,
    pub no_superobing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepResult {
    /// Every measurement read, with its status.
    pub orig: Vec<Observation>,
    pub superobs: Superobs,
}

/// The whole `prep` stage in memory.
pub fn prep(cfg: &DaConfig, grid: &Grid, opts: PrepOptions) -> Result<PrepResult> {
    let mut orig = read_observations(cfg, grid)?;
    let report = cfg.path(Path::new(BADBATCH_FILE));
    if report.exists() {
        let keys = read_badbatch_keys(&report)?;
        let n = mark_bad_batches(&mut orig, &keys);
        log::info!("  {} observations in bad batches marked BAD", n);
    }
    let sob = if opts.no_superobing { 0 } else { cfg.main.sobstride };
    let superobs = superob(&orig, cfg, grid, sob, opts.consider_subgrid)?;
    Ok(PrepResult { orig, superobs })
}
