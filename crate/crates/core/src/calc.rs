//! The calc stage: ensemble observations, local transforms, innovation
//! statistics, bad batches and point logs.
//!
//! [`analyse`] works on in-memory observation-space quantities; [`calc`]
//! wraps it with file I/O.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::analysis::{effective_variance, row_anomalies, standardize, StdObs};
use crate::diag::{self, BadBatch, Metric, ObsMoments, StatRow};
use crate::error::{Error, Result};
use crate::geo::Grid;
use crate::io::{self, ObsStatus, Observation, PointLogRecord, PointLogType, PointLogVar};
use crate::locality::{build_transform_field, LocalAnalysis, ObsLocator, Transform, TransformField};
use crate::obsprep::{interp_at, slot_of};
use crate::prm::{DaConfig, Mode};
use crate::update::{count_members, read_background, read_members, MemberFields};

pub const OBS_FILE: &str = "observations.csv";
pub const OBS_ORIG_FILE: &str = "observations-orig.csv";
pub const X5_FILE: &str = "X5.ekc";
pub const W_FILE: &str = "w.ekc";
pub const DIAG_FILE: &str = "enkf_diag.ekc";
pub const STATS_FILE: &str = "obsstats.csv";

/// Position of a single-observation experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SinglePos {
    Xyz { lon: f64, lat: f64, depth: f64 },
    Ijk { fi: f64, fj: f64, fk: f64 },
}

/// A single observation given by its innovation.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleObs {
    pub pos: SinglePos,
    pub obstype: String,
    pub innovation: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalcOptions {
    pub forecast_stats_only: bool,
    pub ignore_no_obs: bool,
    pub no_mean_update: bool,
    pub point_logs_only: bool,
    pub print_batch_stats: bool,
    pub single_obs: Option<SingleObs>,
    pub use_rmsd: bool,
    pub use_these_obs: Option<PathBuf>,
}

/// Observation-space forecast quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSpace {
    /// GOOD observations with a valid forecast counterpart.
    pub obs: Vec<Observation>,
    /// EnKF: `H(E^f)`; EnOI: `H` of the static ensemble. `p x m`.
    pub he: DMatrix<f64>,
    /// EnOI: `H(x^f)` of the background.
    pub hbg: Option<DVector<f64>>,
}

impl ObsSpace {
    pub fn p(&self) -> usize {
        self.obs.len()
    }

    pub fn m(&self) -> usize {
        self.he.ncols()
    }

    /// Forecast estimate `H x^f` per observation.
    pub fn forecast(&self) -> DVector<f64> {
        match &self.hbg {
            Some(b) => b.clone(),
            None => self.he.column_mean(),
        }
    }

    /// Forecast ensemble in observation space as seen by the statistics:
    /// EnOI uses `H(x^f) 1ᵀ + HA`.
    pub fn forecast_ensemble(&self) -> DMatrix<f64> {
        match &self.hbg {
            None => self.he.clone(),
            Some(b) => {
                let (_, ha) = row_anomalies(&self.he);
                DMatrix::from_fn(ha.nrows(), ha.ncols(), |o, j| b[o] + ha[(o, j)])
            }
        }
    }

    /// Keeps the listed observations.
    pub fn select(&self, keep: &[usize]) -> ObsSpace {
        ObsSpace {
            obs: keep.iter().map(|&o| self.obs[o].clone()).collect(),
            he: self.he.select_rows(keep),
            hbg: self.hbg.as_ref().map(|b| b.select_rows(keep)),
        }
    }
}

/// Standardised quantities with the effective error stds used.
pub fn standardise_obs(cfg: &DaConfig, os: &ObsSpace) -> Result<(StdObs, Vec<f64>)> {
    let m = os.m();
    let hx = os.forecast();
    let (_, ha) = row_anomalies(&os.he);
    let p = os.p();
    let d = DVector::from_fn(p, |o, _| os.obs[o].value - hx[o]);
    let mut sigma = Vec::with_capacity(p);
    for (o, ob) in os.obs.iter().enumerate() {
        let t = cfg
            .obstype(&ob.obstype)
            .ok_or_else(|| Error::Config(format!("unknown observation type {}", ob.obstype)))?;
        let var_f = ha.row(o).iter().map(|v| v * v).sum::<f64>() / (m as f64 - 1.0);
        let v = effective_variance(ob.std, cfg.main.rfactor * t.rfactor, cfg.main.kfactor, var_f, d[o]);
        sigma.push(v.sqrt());
    }
    let std = standardize(&d, &ha, &sigma, &vec![1.0; p])?;
    Ok((std, sigma))
}

/// Everything [`analyse`] produces.
#[derive(Debug, Clone)]
pub struct CalcOutput {
    pub obsspace: ObsSpace,
    pub std: Option<StdObs>,
    pub sigma_eff: Vec<f64>,
    pub field: Option<TransformField>,
    /// `p x m` analysed ensemble observations (statistics view).
    pub he_a: Option<DMatrix<f64>>,
    pub stats: Vec<StatRow>,
    pub badbatches: Vec<BadBatch>,
    pub pointlogs: Vec<PointLogRecord>,
}

fn locator(cfg: &DaConfig, obs: &[Observation]) -> (ObsLocator, Vec<usize>) {
    let specs: Vec<_> = cfg.obstypes.iter().map(|t| cfg.locrad_for(t).cloned()).collect();
    let ty: Vec<usize> = obs.iter().map(|o| cfg.obstype_index(&o.obstype).unwrap_or(0)).collect();
    let loc = ObsLocator::new(
        obs.iter().map(|o| o.lon).collect(),
        obs.iter().map(|o| o.lat).collect(),
        ty.clone(),
        specs,
        true,
    );
    (loc, ty)
}

/// Analysed observations: the transform interpolated at each observation.
pub fn analysed_obs(os: &ObsSpace, field: &TransformField) -> Result<DMatrix<f64>> {
    let ts: Vec<Transform> = os.obs.iter().map(|o| field.interp(o.fi, o.fj)).collect();
    match &os.hbg {
        None => diag::analysed_obs(&os.he, None, &ts),
        Some(b) => {
            let (_, ha) = row_anomalies(&os.he);
            diag::analysed_obs(&ha, Some(b), &ts)
        }
    }
}

/// Per-variable member values at one horizontal cell for point logs:
/// `[nk][m]`.
pub type ColumnFn<'a> = dyn Fn(&str, usize, usize) -> Result<Vec<Vec<f64>>> + 'a;

/// Runs the analysis on in-memory observation-space quantities.
pub fn analyse(cfg: &DaConfig, grid: &Grid, os: ObsSpace, opts: &CalcOptions, columns: Option<&ColumnFn>) -> Result<CalcOutput> {
    let metric = if opts.use_rmsd { Metric::Rmsd } else { Metric::Mad };
    let he_f_stats = os.forecast_ensemble();
    let regions = cfg.main.effective_regions();
    let zints = cfg.main.effective_zstatints();
    if os.p() == 0 && !opts.ignore_no_obs && !opts.forecast_stats_only {
        return Err(Error::NoObservations);
    }
    let mo_f = ObsMoments::new(&os.obs, &he_f_stats, None);
    let badbatches = diag::detect_bad_batches(&os.obs, &mo_f.inn_f, &cfg.main.badbatches);
    if opts.forecast_stats_only || os.m() < 2 {
        let stats = diag::innovation_stats(&os.obs, &mo_f, &cfg.obstypes, &regions, &zints, cfg.main.date, metric);
        return Ok(CalcOutput {
            obsspace: os,
            std: None,
            sigma_eff: Vec::new(),
            field: None,
            he_a: None,
            stats,
            badbatches,
            pointlogs: Vec::new(),
        });
    }
    let (std, sigma_eff) = standardise_obs(cfg, &os)?;
    let (loc, ty) = locator(cfg, &os.obs);
    let la = LocalAnalysis {
        obs: &std,
        locator: &loc,
        obs_type: &ty,
        ntypes: cfg.obstypes.len(),
        mode: cfg.main.mode,
        scheme: cfg.main.scheme,
        alpha: cfg.main.alpha,
        no_mean_update: opts.no_mean_update,
    };
    let field = if opts.point_logs_only {
        None
    } else {
        Some(build_transform_field(grid, cfg.main.stride, &la)?)
    };
    let (he_a, stats) = match &field {
        Some(f) => {
            let he_a = analysed_obs(&os, f)?;
            let mo = ObsMoments::new(&os.obs, &he_f_stats, Some(&he_a));
            let stats = diag::innovation_stats(&os.obs, &mo, &cfg.obstypes, &regions, &zints, cfg.main.date, metric);
            (Some(he_a), stats)
        }
        None => (None, Vec::new()),
    };
    let mut pointlogs = Vec::new();
    for pl in &cfg.main.pointlogs {
        pointlogs.push(build_pointlog(cfg, grid, &os, &la, field.as_ref(), pl.i, pl.j, columns)?);
    }
    Ok(CalcOutput {
        obsspace: os,
        std: Some(std),
        sigma_eff,
        field,
        he_a,
        stats,
        badbatches,
        pointlogs,
    })
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Assembles the point log for grid cell `(i, j)`.
#[allow(clippy::too_many_arguments)]
pub fn build_pointlog(
    cfg: &DaConfig,
    grid: &Grid,
    os: &ObsSpace,
    la: &LocalAnalysis,
    field: Option<&TransformField>,
    i: usize,
    j: usize,
    columns: Option<&ColumnFn>,
) -> Result<PointLogRecord> {
    if i >= grid.ni || j >= grid.nj {
        return Err(Error::InvalidArgument(format!(
            "point log location ({i}, {j}) is outside the {} x {} grid",
            grid.ni, grid.nj
        )));
    }
    let (lon, lat) = (grid.lon[i], grid.lat[j]);
    let r = la.at(lon, lat)?;
    let m = la.m();
    let enkf = cfg.main.mode == Mode::Enkf;
    let actual = field.map(|f| f.interp(i as f64, j as f64));
    let (x5, x5_actual, w_actual) = if enkf {
        let xa = match &actual {
            Some(Transform::X5(x)) => x.clone(),
            _ => r.transform.x5.clone(),
        };
        (to_rows(&r.transform.x5), to_rows(&xa), Vec::new())
    } else {
        let wa = match &actual {
            Some(Transform::W(w)) => w.clone(),
            _ => r.transform.w.clone(),
        };
        (Vec::new(), Vec::new(), wa.iter().copied().collect())
    };
    let idx: Vec<usize> = r.local.iter().map(|&(o, _)| o).collect();
    let pick = |f: &dyn Fn(&Observation) -> f64| idx.iter().map(|&o| f(&os.obs[o])).collect::<Vec<f64>>();
    let mut vars = Vec::new();
    if let Some(col) = columns {
        for v in &cfg.model.vars {
            let forecast = col(&v.name, i, j)?;
            let analysis = forecast
                .iter()
                .map(|row| match &actual {
                    Some(Transform::X5(x5)) => diag::analysed_row_enkf(row, x5),
                    _ => row.clone(),
                })
                .collect();
            vars.push(PointLogVar {
                name: v.name.clone(),
                forecast,
                analysis: if enkf { Some(analysis) } else { None },
                inflation: diag::inflation_attr(cfg, &v.name),
            });
        }
    }
    let rec = PointLogRecord {
        date: cfg.main.date,
        i,
        j,
        lon,
        lat,
        depth: grid.depth[grid.cell(i, j)],
        mode: cfg.main.mode.as_str().into(),
        scheme: cfg.main.scheme.as_str().into(),
        alpha: cfg.main.alpha,
        m,
        p: idx.len(),
        obs_types: cfg
            .obstypes
            .iter()
            .map(|t| {
                let l = cfg.locrad_for(t);
                PointLogType {
                    name: t.name.clone(),
                    rfactor: t.rfactor,
                    locrad: l.map(|l| l.radii.clone()).unwrap_or_default(),
                    locweight: l.map(|l| l.weights.clone()).unwrap_or_default(),
                }
            })
            .collect(),
        obs_ids: idx.iter().map(|&o| os.obs[o].id).collect(),
        lcoeffs: r.local.iter().map(|&(_, c)| c).collect(),
        obs_lon: pick(&|o| o.lon),
        obs_lat: pick(&|o| o.lat),
        obs_depth: pick(&|o| o.depth),
        obs_val: pick(&|o| o.value),
        obs_std: pick(&|o| o.std),
        obs_fi: pick(&|o| o.fi),
        obs_fj: pick(&|o| o.fj),
        obs_fk: pick(&|o| o.fk),
        obs_type: idx.iter().map(|&o| la.obs_type[o]).collect(),
        obs_date: pick(&|o| o.time),
        s: r.local_obs.s.iter().copied().collect(),
        s_mat: to_rows(&r.local_obs.s_mat.transpose()),
        x5,
        x5_actual,
        w: r.transform.w.iter().copied().collect(),
        w_actual,
        vars,
    };
    rec.validate()?;
    Ok(rec)
}

/// Which files fed each `(var, slot)` request: `a` asynchronous, `s`
/// synchronous fallback, `.` synchronous type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotLog {
    pub lines: Vec<String>,
}

/// Loads forecast fields lazily, keyed by `(var, slot)`.
struct FieldCache<'a> {
    cfg: &'a DaConfig,
    m: usize,
    ensdir: Option<PathBuf>,
    bgdir: PathBuf,
    members: HashMap<(String, Option<i32>), MemberFields>,
    bg: HashMap<(String, Option<i32>), Vec<f64>>,
}

impl FieldCache<'_> {
    fn slot_available(&self, var: &str, slot: i32) -> bool {
        match self.cfg.main.mode {
            Mode::Enkf => {
                let dir = self.ensdir.as_deref().unwrap_or(Path::new("."));
                (1..=self.m).all(|k| io::member_path(dir, k, var, Some(slot)).exists())
            }
            Mode::Enoi => io::bg_path(&self.bgdir, var, Some(slot)).exists(),
        }
    }

    fn members(&mut self, var: &str, slot: Option<i32>) -> Result<&MemberFields> {
        let key = (var.to_string(), slot);
        if !self.members.contains_key(&key) {
            let dir = self
                .ensdir
                .as_ref()
                .ok_or_else(|| Error::Config("ENSDIR is required to compute ensemble observations".into()))?;
            let slot_for_members = if self.cfg.main.mode == Mode::Enoi { None } else { slot };
            let f = read_members(dir, var, self.m, slot_for_members)?;
            self.members.insert(key.clone(), f);
        }
        Ok(&self.members[&key])
    }

    fn background(&mut self, var: &str, slot: Option<i32>) -> Result<&Vec<f64>> {
        let key = (var.to_string(), slot);
        if !self.bg.contains_key(&key) {
            let f = read_background(&self.bgdir, var, slot)?;
            self.bg.insert(key.clone(), f.members.into_iter().next().unwrap_or_default());
        }
        Ok(&self.bg[&key])
    }
}

/// Ensemble size found on disk for the configuration.
pub fn ensemble_size(cfg: &DaConfig) -> Result<usize> {
    let Some(dir) = cfg.main.ensdir.as_ref().map(|d| cfg.path(d)) else {
        return Ok(0);
    };
    let var = cfg
        .model
        .vars
        .first()
        .ok_or_else(|| Error::Config("model has no variables".into()))?;
    let m = count_members(&dir, &var.name);
    if m < 2 {
        return Err(Error::Config(format!("found {m} members of {} in {}", var.name, dir.display())));
    }
    Ok(m)
}

fn h_value(grid: &Grid, field: &[f64], bias: Option<&[f64]>, o: &Observation) -> Result<f64> {
    let v = interp_at(grid, field, o.fi, o.fj, o.fk)?;
    match bias {
        Some(b) => Ok(v - interp_at(grid, b, o.fi, o.fj, o.fk)?),
        None => Ok(v),
    }
}

/// Ensemble observations from files; observations on land are dropped.
pub fn ensemble_observations_from_files(cfg: &DaConfig, grid: &Grid, obs: Vec<Observation>) -> Result<(ObsSpace, SlotLog)> {
    let m = ensemble_size(cfg)?;
    let ensdir = cfg.main.ensdir.as_ref().map(|d| cfg.path(d));
    let bgdir = cfg.main.bgdir.as_ref().map(|d| cfg.path(d)).unwrap_or_else(|| cfg.workdir.clone());
    let mut cache = FieldCache {
        cfg,
        m,
        ensdir,
        bgdir,
        members: HashMap::new(),
        bg: HashMap::new(),
    };
    let enoi = cfg.main.mode == Mode::Enoi;
    let mut log = SlotLog::default();
    let mut resolved: Vec<Option<i32>> = Vec::with_capacity(obs.len());
    for t in &cfg.obstypes {
        let mine: Vec<&Observation> = obs.iter().filter(|o| o.obstype == t.name).collect();
        if mine.is_empty() {
            continue;
        }
        let mut line = format!("{} ", t.name);
        if t.is_async() {
            let slots: BTreeMap<i32, ()> = mine.iter().map(|o| (slot_of(o, t, cfg.main.date), ())).collect();
            line.push('|');
            for &s in slots.keys() {
                line.push(if cache.slot_available(&t.var, s) { 'a' } else { 's' });
                line.push('|');
            }
        } else {
            line.push('.');
        }
        if enoi {
            line.push('+');
        }
        log.lines.push(line);
    }
    for o in &obs {
        let t = cfg
            .obstype(&o.obstype)
            .ok_or_else(|| Error::Config(format!("unknown observation type {}", o.obstype)))?;
        let slot = if t.is_async() {
            let s = slot_of(o, t, cfg.main.date);
            cache.slot_available(&t.var, s).then_some(s)
        } else {
            None
        };
        resolved.push(slot);
    }
    let mut keep = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut bgv: Vec<f64> = Vec::new();
    for (o, ob) in obs.iter().enumerate() {
        let t = cfg.obstype(&ob.obstype).expect("checked above");
        let slot = resolved[o];
        let mut row = Vec::with_capacity(m);
        let mut ok = true;
        if m >= 2 {
            let bias = match &t.var2 {
                Some(v2) => Some(cache.members(v2, slot)?.clone()),
                None => None,
            };
            let f = cache.members(&t.var, slot)?;
            for k in 0..m {
                match h_value(grid, &f.members[k], bias.as_ref().map(|b| b.members[k].as_slice()), ob) {
                    Ok(v) => row.push(v),
                    Err(Error::OnLand | Error::InvalidArgument(_)) => {
                        ok = false;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if ok && enoi {
            let bias = match &t.var2 {
                Some(v2) => Some(cache.background(v2, slot)?.clone()),
                None => None,
            };
            let f = cache.background(&t.var, slot)?;
            match h_value(grid, f, bias.as_deref(), ob) {
                Ok(v) => bgv.push(v),
                Err(Error::OnLand | Error::InvalidArgument(_)) => ok = false,
                Err(e) => return Err(e),
            }
        }
        if ok {
            keep.push(o);
            rows.push(row);
        }
    }
    let cols = if m >= 2 { m } else { 0 };
    let he = DMatrix::from_fn(rows.len(), cols, |o, j| rows[o][j]);
    let kept: Vec<Observation> = keep.iter().map(|&o| obs[o].clone()).collect();
    if kept.len() < obs.len() {
        log::warn!("  {} observations without a forecast counterpart dropped", obs.len() - kept.len());
    }
    let os = ObsSpace {
        obs: kept,
        he: if cols == 0 && enoi {
            DMatrix::from_fn(bgv.len(), 1, |o, _| bgv[o])
        } else {
            he
        },
        hbg: enoi.then(|| DVector::from_vec(bgv)),
    };
    Ok((os, log))
}

/// Builds the single-observation table entry; its value is set after the
/// forecast is known.
pub fn single_observation(cfg: &DaConfig, grid: &Grid, s: &SingleObs) -> Result<Observation> {
    let t = cfg
        .obstype(&s.obstype)
        .ok_or_else(|| Error::Config(format!("unknown observation type {}", s.obstype)))?;
    if !(s.std > 0.0) {
        return Err(Error::InvalidArgument(format!("single observation std {} must be positive", s.std)));
    }
    let (lon, lat, depth, fi, fj, fk) = match s.pos {
        SinglePos::Xyz { lon, lat, depth } => {
            let (fi, fj) = grid
                .xy_to_fij(lon, lat)
                .ok_or_else(|| Error::InvalidArgument(format!("single observation ({lon}, {lat}) is outside the grid")))?;
            let fk = if t.issurface { 0.0 } else { grid.z_to_fk(depth) };
            (lon, lat, depth, fi, fj, fk)
        }
        SinglePos::Ijk { fi, fj, fk } => {
            if !grid.contains_fij(fi, fj) {
                return Err(Error::InvalidArgument(format!("single observation ({fi}, {fj}) is outside the grid")));
            }
            let (lon, lat) = grid.fij_to_xy(fi, fj);
            let fk = if t.issurface { 0.0 } else { fk };
            let depth = if t.issurface { 0.0 } else { interp_axis(&grid.z, fk) };
            (lon, lat, depth, fi, fj, fk)
        }
    };
    Ok(Observation {
        id: 0,
        obstype: t.name.clone(),
        product: "single".into(),
        instrument: "single".into(),
        batch: 0,
        lon,
        lat,
        depth,
        fi,
        fj,
        fk,
        value: 0.0,
        std: s.std,
        time: cfg.main.date,
        status: ObsStatus::Good,
    })
}

fn interp_axis(z: &[f64], f: f64) -> f64 {
    let n = z.len();
    if n == 1 {
        return z[0];
    }
    let k = (f.floor().max(0.0) as usize).min(n - 2);
    z[k] + (f - k as f64) * (z[k + 1] - z[k])
}

/// Files written and the run's summaries.
#[derive(Debug, Clone)]
pub struct CalcRun {
    pub output: CalcOutput,
    pub slot_log: SlotLog,
    pub written: Vec<PathBuf>,
    pub log: String,
}

/// The whole calc stage on files in the configuration's working directory.
pub fn calc(cfg: &DaConfig, grid: &Grid, opts: &CalcOptions) -> Result<CalcRun> {
    let mut text = String::new();
    let obs: Vec<Observation> = match &opts.single_obs {
        Some(s) => vec![single_observation(cfg, grid, s)?],
        None => {
            let path = match &opts.use_these_obs {
                Some(p) => cfg.path(p),
                None => cfg.workdir.join(OBS_FILE),
            };
            io::read_obs(&path)?.into_iter().filter(Observation::is_good).collect()
        }
    };
    let (mut os, slot_log) = ensemble_observations_from_files(cfg, grid, obs)?;
    let _ = writeln!(text, "  calculating ensemble observations:");
    let _ = writeln!(text, "    ensemble size = {}", os.m());
    for l in &slot_log.lines {
        let _ = writeln!(text, "    {l}");
    }
    if let Some(s) = &opts.single_obs {
        let hx = os.forecast();
        if let Some(o) = os.obs.first_mut() {
            o.value = hx[0] + s.innovation;
        } else {
            return Err(Error::InvalidArgument("single observation has no forecast counterpart (on land?)".into()));
        }
    }
    let m = os.m();
    let enkf = cfg.main.mode == Mode::Enkf;
    let ensdir = cfg.main.ensdir.as_ref().map(|d| cfg.path(d));
    let columns = |var: &str, i: usize, j: usize| -> Result<Vec<Vec<f64>>> {
        let dir = ensdir
            .as_ref()
            .ok_or_else(|| Error::Config("ENSDIR is required for point logs".into()))?;
        let f = if enkf {
            read_members(dir, var, m, None)?
        } else {
            let bgdir = cfg.main.bgdir.as_ref().map(|d| cfg.path(d)).unwrap_or_else(|| cfg.workdir.clone());
            read_background(&bgdir, var, None)?
        };
        Ok(column(grid, &f, i, j))
    };
    let out = analyse(cfg, grid, os, opts, Some(&columns))?;
    let mut written = Vec::new();
    if let Some(f) = &out.field {
        let p = cfg.workdir.join(if f.is_enkf() { X5_FILE } else { W_FILE });
        io::write_transforms(&p, f)?;
        written.push(p);
        let d = cfg.workdir.join(DIAG_FILE);
        io::write_diag(&d, f)?;
        written.push(d);
        let _ = writeln!(text, "  transforms written to {}", written[0].display());
    }
    if !out.stats.is_empty() {
        let metric = if opts.use_rmsd { Metric::Rmsd } else { Metric::Mad };
        let _ = writeln!(text, "  observation statistics:");
        text.push_str(&diag::format_stats_table(&out.stats, metric));
        let p = cfg.workdir.join(STATS_FILE);
        diag::write_stats_csv(&p, &out.stats)?;
        written.push(p);
    }
    if opts.print_batch_stats {
        let mo = ObsMoments::new(&out.obsspace.obs, &out.obsspace.forecast_ensemble(), None);
        let _ = writeln!(text, "  batch statistics:");
        text.push_str(&diag::format_batch_stats(&out.obsspace.obs, &mo.inn_f));
    }
    if !cfg.main.badbatches.is_empty() {
        let p = cfg.workdir.join(crate::obsprep::BADBATCH_FILE);
        diag::write_badbatch_report(&p, &out.badbatches)?;
        let _ = writeln!(text, "  {} bad batches written to {}", out.badbatches.len(), p.display());
        written.push(p);
    }
    for rec in &out.pointlogs {
        let p = cfg.workdir.join(PointLogRecord::file_name(rec.i, rec.j));
        io::write_pointlog(&p, rec)?;
        written.push(p);
    }
    Ok(CalcRun {
        output: out,
        slot_log,
        written,
        log: text,
    })
}

/// Member values `[nk][m]` of the wet levels at `(i, j)`.
pub fn column(grid: &Grid, f: &MemberFields, i: usize, j: usize) -> Vec<Vec<f64>> {
    let plane = grid.ni * grid.nj;
    let c = grid.cell(i, j);
    let nl = grid.numlevels_at(i, j).min(f.levels());
    (0..nl).map(|k| f.members.iter().map(|mem| mem[k * plane + c]).collect()).collect()
}

/// Recomputes the transform from a point log's `s` and `S`.
pub fn replay_pointlog(rec: &PointLogRecord) -> Result<crate::analysis::LocalTransform> {
    let m = rec.m;
    let p = rec.p;
    let s = DVector::from_vec(rec.s.clone());
    let s_mat = DMatrix::from_fn(p, m, |o, j| rec.s_mat[j][o]);
    let scheme = match rec.scheme.as_str() {
        "ETKF" => crate::prm::Scheme::Etkf,
        "DENKF" => crate::prm::Scheme::Denkf,
        other => return Err(Error::InvalidArgument(format!("point log: unknown scheme {other}"))),
    };
    crate::analysis::compute_transform(&StdObs { s, s_mat }, scheme, rec.alpha)
}
