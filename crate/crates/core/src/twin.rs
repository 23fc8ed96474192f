//! Twin experiments on a ring grid: a known truth is observed with noise
//! and assimilated cycle by cycle through the production calc and update
//! code, in memory.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::calc::{analyse, CalcOptions, ObsSpace};
use crate::error::{Error, Result};
use crate::geo::Grid;
use crate::io::{ObsStatus, Observation};
use crate::models::{self, ModelKind, ModelSpec};
use crate::oracle::{self, DenseKfState};
use crate::prm::{parse_grid, parse_main, parse_model, parse_obsdata, parse_obstypes, DaConfig, Mode};
use crate::update::{inflate, update_field, MemberFields};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Lorenz-96, DEnKF, localised, capped inflation.
    Lorenz96,
    /// Linear advection, ETKF, no localisation, checked against the dense KF.
    LinAdvOracle,
    /// Lorenz-96 with a static ensemble (EnOI).
    EnoiLorenz96,
}

impl Scenario {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lorenz96" => Some(Scenario::Lorenz96),
            "linadv-oracle" => Some(Scenario::LinAdvOracle),
            "enoi-lorenz96" => Some(Scenario::EnoiLorenz96),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Lorenz96 => "lorenz96",
            Scenario::LinAdvOracle => "linadv-oracle",
            Scenario::EnoiLorenz96 => "enoi-lorenz96",
        }
    }
}

/// Experiment settings; [`TwinConfig::new`] gives the reference values.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub m: usize,
    pub cycles: usize,
    /// Observations per cycle; `None` observes every grid point.
    pub nobs: Option<usize>,
    pub obs_std: f64,
    /// Main-file settings appended verbatim (scheme, localisation, inflation).
    pub main_extra: String,
    /// Std of the initial ensemble perturbations.
    pub init_std: f64,
    /// Scale applied to the static ensemble anomalies (EnOI).
    pub static_scale: f64,
    pub seed: u64,
}

/// One grid spacing on the ring, in km.
pub fn ring_spacing_km(n: usize) -> f64 {
    2.0 * std::f64::consts::PI * crate::geo::EARTH_RADIUS_KM / n as f64
}

impl TwinConfig {
    pub fn new(scenario: Scenario) -> Self {
        match scenario {
            Scenario::Lorenz96 => TwinConfig {
                scenario,
                n: 40,
                m: 25,
                cycles: 500,
                nobs: None,
                obs_std: 1.0,
                main_extra: format!(
                    "SCHEME = DENKF\nLOCRAD = {}\nINFLATION = 1.05 0.5\n",
                    10.0 * ring_spacing_km(40)
                ),
                init_std: 1.0,
                static_scale: 1.0,
                seed: 20_240_601,
            },
            Scenario::LinAdvOracle => TwinConfig {
                scenario,
                n: 16,
                m: 20,
                cycles: 20,
                nobs: Some(8),
                obs_std: 0.5,
                main_extra: "SCHEME = ETKF\n".into(),
                init_std: 1.0,
                static_scale: 1.0,
                seed: 7,
            },
            Scenario::EnoiLorenz96 => TwinConfig {
                scenario,
                n: 40,
                m: 100,
                cycles: 500,
                nobs: None,
                obs_std: 1.0,
                main_extra: format!("LOCRAD = {}\n", 10.0 * ring_spacing_km(40)),
                init_std: 1.0,
                static_scale: 0.3,
                seed: 1_234_567,
            },
        }
    }

    fn mode(&self) -> Mode {
        if self.scenario == Scenario::EnoiLorenz96 {
            Mode::Enoi
        } else {
            Mode::Enkf
        }
    }

    fn model(&self) -> ModelSpec {
        match self.scenario {
            Scenario::LinAdvOracle => ModelSpec::linadv(self.n),
            _ => ModelSpec::lorenz96(self.n),
        }
    }
}

/// Ring grid: `n` longitudes evenly spaced from 0, one latitude at the equator.
pub fn ring_grid(n: usize) -> Result<Grid> {
    let dl = 360.0 / n as f64;
    Grid::surface("ring", (0..n).map(|i| i as f64 * dl).collect(), vec![0.0])
}

pub const MODEL_PRM: &str = "NAME = ring\nVAR = x\n";
pub const GRID_PRM: &str =
    "NAME = ring\nVTYPE = z\nDATA = grid\nXVARNAME = lon\nYVARNAME = lat\nZVARNAME = z\nDEPTHVARNAME = depth\nNUMLEVELSVARNAME = numlevels\n";
pub const OBSTYPES_PRM: &str = "NAME = X\nVAR = x\nISSURFACE = yes\nHFUNCTION = standard\n";

/// Main parameter file text for a ring experiment.
pub fn main_prm(mode: Mode, extra: &str) -> String {
    let mode_lines = match mode {
        Mode::Enkf => "MODE = ENKF\nENSDIR = ens\n",
        Mode::Enoi => "MODE = ENOI\nENSDIR = ens\nBGDIR = bg\n",
    };
    format!(
        "{mode_lines}MODEL = model.prm\nGRID = grid.prm\nOBSTYPES = obstypes.prm\nOBS = obs.prm\nDATE = 0\n{extra}"
    )
}

/// In-memory configuration of a ring experiment, parsed from parameter text.
pub fn ring_config(mode: Mode, extra: &str, workdir: &Path) -> Result<DaConfig> {
    DaConfig::assemble(
        parse_main(&main_prm(mode, extra))?,
        parse_model(MODEL_PRM)?,
        parse_grid(GRID_PRM)?,
        parse_obstypes(OBSTYPES_PRM)?,
        parse_obsdata("")?,
        workdir.to_path_buf(),
    )
}

/// Metrics of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub rmse_f: f64,
    pub rmse_a: f64,
    pub spread_f: f64,
    pub spread_a: f64,
    pub dfs_mean: f64,
    pub srf_mean: f64,
    /// Relative error of the analysed mean against the dense KF.
    pub kf_mean_err: Option<f64>,
    /// Relative Frobenius error of the analysed covariance against the dense KF.
    pub kf_cov_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinResult {
    pub scenario: Scenario,
    pub metrics: Vec<CycleMetrics>,
}

impl TwinResult {
    /// Mean of a metric over cycles `from..=to` (1-based, clamped).
    pub fn time_mean(&self, from: usize, to: usize, f: impl Fn(&CycleMetrics) -> f64) -> f64 {
        let v: Vec<f64> = self.metrics.iter().filter(|c| c.cycle >= from && c.cycle <= to).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cycle,rmse_f,rmse_a,spread_f,spread_a,dfs_mean,srf_mean,kf_mean_err,kf_cov_err\n");
        let o = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:e}"));
        for c in &self.metrics {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.cycle,
                c.rmse_f,
                c.rmse_a,
                c.spread_f,
                c.spread_a,
                c.dfs_mean,
                c.srf_mean,
                o(c.kf_mean_err),
                o(c.kf_cov_err)
            ));
        }
        s
    }
}

fn rmse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

/// Root of the mean element-wise ensemble variance.
fn mean_spread(e: &DMatrix<f64>) -> f64 {
    let a = crate::ensemble::Ensemble::new(e.clone()).map(|e| e.anomalies()).unwrap_or_else(|_| e.clone());
    let m = e.ncols() as f64;
    (a.norm_squared() / (m - 1.0) / e.nrows() as f64).sqrt()
}

fn to_fields(e: &DMatrix<f64>) -> MemberFields {
    MemberFields {
        dims: vec![1, e.nrows()],
        members: (0..e.ncols()).map(|j| e.column(j).iter().copied().collect()).collect(),
    }
}

fn from_fields(f: &MemberFields) -> DMatrix<f64> {
    let n = f.members[0].len();
    DMatrix::from_fn(n, f.m(), |i, j| f.members[j][i])
}

/// Observations of the truth at grid points (`nobs = None`) or at random
/// fractional positions, with their interpolation weights.
fn observe(grid: &Grid, truth: &DVector<f64>, nobs: Option<usize>, std: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<Observation>, DMatrix<f64>)> {
    let n = grid.ni;
    let positions: Vec<f64> = match nobs {
        None => (0..n).map(|i| i as f64).collect(),
        Some(p) => (0..p).map(|_| rand::Rng::random_range(rng, 0.0..n as f64)).collect(),
    };
    let noise = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut h = DMatrix::zeros(positions.len(), n);
    let mut obs = Vec::with_capacity(positions.len());
    for (o, &fi) in positions.iter().enumerate() {
        for (c, w) in grid.horizontal_weights(fi, 0.0, 0)? {
            h[(o, c)] += w;
        }
        let hx: f64 = (0..n).map(|c| h[(o, c)] * truth[c]).sum();
        let (lon, lat) = grid.fij_to_xy(fi, 0.0);
        obs.push(Observation {
            id: o,
            obstype: "X".into(),
            product: "twin".into(),
            instrument: "twin".into(),
            batch: 0,
            lon,
            lat,
            depth: 0.0,
            fi,
            fj: 0.0,
            fk: 0.0,
            value: hx + noise.sample(rng),
            std,
            time: 0.0,
            status: ObsStatus::Good,
        });
    }
    Ok((obs, h))
}

/// Spun-up Lorenz-96 (or random linear-advection) truth.
fn initial_truth(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    match spec.kind {
        ModelKind::Lorenz96 => {
            let mut x = vec![spec.forcing; spec.n];
            x[0] += 0.01;
            Ok(DVector::from_vec(models::run(spec, &x, 1000)?))
        }
        ModelKind::LinAdv => Ok(DVector::from_fn(spec.n, |_, _| StandardNormal.sample(rng))),
    }
}

/// Runs the experiment.
pub fn run_twin(tc: &TwinConfig) -> Result<TwinResult> {
    let grid = ring_grid(tc.n)?;
    let cfg = ring_config(tc.mode(), &tc.main_extra, Path::new("."))?;
    let spec = tc.model();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut truth = initial_truth(&spec, &mut rng)?;
    let init = Normal::new(0.0, tc.init_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let opts = CalcOptions {
        ignore_no_obs: true,
        ..CalcOptions::default()
    };
    let inf = cfg.inflation_for("x");
    let mut metrics = Vec::with_capacity(tc.cycles);

    match tc.mode() {
        Mode::Enkf => {
            let mut e = DMatrix::from_fn(tc.n, tc.m, |i, _| truth[i] + init.sample(&mut rng));
            let mut kf = (tc.scenario == Scenario::LinAdvOracle).then(|| {
                let ens = crate::ensemble::Ensemble::new(e.clone()).expect("m >= 2");
                DenseKfState {
                    x: ens.mean(),
                    p: ens.covariance().expect("small n"),
                }
            });
            for cycle in 1..=tc.cycles {
                truth = models::propagate_state(&spec, &truth, 1, tc.seed ^ 0x5eed ^ cycle as u64)?;
                e = models::propagate_ensemble(&spec, &e, 1, tc.seed.wrapping_add(cycle as u64))?;
                if let Some(k) = kf.as_mut() {
                    let mm = spec.matrix().expect("linear model");
                    *k = oracle::kf_forecast(k, &mm, &DMatrix::zeros(tc.n, tc.n))?;
                }
                let (obs, h) = observe(&grid, &truth, tc.nobs, tc.obs_std, &mut rng)?;
                let he = &h * &e;
                let xf = e.column_mean();
                let spread_f = mean_spread(&e);
                let os = ObsSpace {
                    obs: obs.clone(),
                    he,
                    hbg: None,
                };
                let out = analyse(&cfg, &grid, os, &opts, None)?;
                let field = out.field.as_ref().expect("transforms requested");
                let forecast = to_fields(&e);
                let mut an = forecast.clone();
                update_field(&mut an, &grid, field, None)?;
                inflate(&forecast, &mut an, &grid, inf);
                e = from_fields(&an);
                let xa = e.column_mean();
                let (mut kme, mut kce) = (None, None);
                if let Some(k) = kf.as_mut() {
                    let r = DMatrix::from_diagonal(&DVector::from_iterator(obs.len(), obs.iter().map(|o| o.std * o.std)));
                    let y = DVector::from_iterator(obs.len(), obs.iter().map(|o| o.value));
                    *k = oracle::kf_analysis(k, &h, &r, &y)?;
                    let pa = crate::ensemble::covariance(&crate::ensemble::Ensemble::new(e.clone())?.anomalies());
                    kme = Some((&xa - &k.x).norm() / k.x.norm());
                    kce = Some((&pa - &k.p).norm() / k.p.norm());
                }
                metrics.push(CycleMetrics {
                    cycle,
                    rmse_f: rmse(&xf, &truth),
                    rmse_a: rmse(&xa, &truth),
                    spread_f,
                    spread_a: mean_spread(&e),
                    dfs_mean: field.dfs.iter().sum::<f64>() / field.dfs.len() as f64,
                    srf_mean: field.srf.iter().sum::<f64>() / field.srf.len() as f64,
                    kf_mean_err: kme,
                    kf_cov_err: kce,
                });
                let worst = metrics.last().map_or(0.0, |c| c.rmse_a);
                if !(worst <= 10.0 * tc.obs_std) {
                    return Err(Error::Divergence(format!(
                        "{}: analysis RMSE {worst} exceeds 10 x obs error at cycle {cycle}",
                        tc.scenario.name()
                    )));
                }
            }
        }
        Mode::Enoi => {
            let stat = static_ensemble(&spec, &truth, tc.m, tc.static_scale, tc.seed ^ 0xe401)?;
            let (_, a) = crate::ensemble::Ensemble::new(stat.clone())?.mean_and_anomalies();
            let mut xb = DVector::from_fn(tc.n, |i, _| truth[i] + init.sample(&mut rng));
            let anoms = to_fields(&a);
            for cycle in 1..=tc.cycles {
                truth = models::propagate_state(&spec, &truth, 1, tc.seed ^ 0x5eed ^ cycle as u64)?;
                xb = models::propagate_state(&spec, &xb, 1, 0)?;
                let (obs, h) = observe(&grid, &truth, tc.nobs, tc.obs_std, &mut rng)?;
                let os = ObsSpace {
                    obs,
                    he: &h * &stat,
                    hbg: Some(&h * &xb),
                };
                let out = analyse(&cfg, &grid, os, &opts, None)?;
                let field = out.field.as_ref().expect("transforms requested");
                let mut bg = MemberFields {
                    dims: vec![1, tc.n],
                    members: vec![xb.iter().copied().collect()],
                };
                let rmse_f = rmse(&xb, &truth);
                update_field(&mut bg, &grid, field, Some(&anoms))?;
                xb = DVector::from_vec(bg.members.remove(0));
                let spread = mean_spread(&stat);
                metrics.push(CycleMetrics {
                    cycle,
                    rmse_f,
                    rmse_a: rmse(&xb, &truth),
                    spread_f: spread,
                    spread_a: spread,
                    dfs_mean: field.dfs.iter().sum::<f64>() / field.dfs.len() as f64,
                    srf_mean: field.srf.iter().sum::<f64>() / field.srf.len() as f64,
                    kf_mean_err: None,
                    kf_cov_err: None,
                });
                let worst = metrics.last().map_or(0.0, |c| c.rmse_a);
                if !(worst <= 10.0 * tc.obs_std) {
                    return Err(Error::Divergence(format!(
                        "{}: analysis RMSE {worst} exceeds 10 x obs error at cycle {cycle}",
                        tc.scenario.name()
                    )));
                }
            }
        }
    }
    Ok(TwinResult {
        scenario: tc.scenario,
        metrics,
    })
}

/// Static ensemble: states sampled every 20 cycles from a free run started
/// away from the truth, anomalies scaled by `scale` about the sample mean.
pub fn static_ensemble(spec: &ModelSpec, start: &DVector<f64>, m: usize, scale: f64, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = start
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + z
        })
        .collect();
    x = models::run(spec, &x, 500)?;
    let mut cols = Vec::with_capacity(m);
    for _ in 0..m {
        x = models::run(spec, &x, 20)?;
        cols.push(DVector::from_vec(x.clone()));
    }
    let e = DMatrix::from_columns(&cols);
    let (mean, a) = crate::ensemble::Ensemble::new(e)?.mean_and_anomalies();
    Ok(crate::ensemble::Ensemble::from_mean_anomalies(&mean, &(a * scale))?.into_matrix())
}

/// Writes a complete on-disk ring case: parameter files, grid, ensemble
/// members (and background for EnOI) and a CSV observation file. Returns
/// the main parameter file path.
pub fn write_ring_case(dir: &Path, mode: Mode, extra: &str, e: &DMatrix<f64>, bg: Option<&DVector<f64>>, obs_csv: &str) -> Result<PathBuf> {
    let n = e.nrows();
    let w = |name: &str, text: &str| std::fs::write(dir.join(name), text).map_err(|err| Error::io(dir.join(name), err));
    w("main.prm", &main_prm(mode, extra))?;
    w("model.prm", MODEL_PRM)?;
    w("grid.prm", GRID_PRM)?;
    w("obstypes.prm", OBSTYPES_PRM)?;
    w("obs.prm", "PRODUCT = twin\nREADER = csv\nTYPE = X\nFILE = raw/*.csv\n")?;
    for d in ["grid", "ens", "bg", "raw"] {
        std::fs::create_dir_all(dir.join(d)).map_err(|err| Error::io(dir.join(d), err))?;
    }
    let g = ring_grid(n)?;
    let gd = dir.join("grid");
    crate::io::write_array_f64(&gd.join("lon.ekc"), &[n], &g.lon)?;
    crate::io::write_array_f64(&gd.join("lat.ekc"), &[1], &g.lat)?;
    crate::io::write_array_f64(&gd.join("z.ekc"), &[1], &g.z)?;
    crate::io::write_array_f64(&gd.join("depth.ekc"), &[1, n], &g.depth)?;
    let nl: Vec<f64> = g.numlevels.iter().map(|&v| v as f64).collect();
    crate::io::write_array_f64(&gd.join("numlevels.ekc"), &[1, n], &nl)?;
    for j in 0..e.ncols() {
        let col: Vec<f64> = e.column(j).iter().copied().collect();
        crate::io::write_array_f64(&crate::io::member_path(&dir.join("ens"), j + 1, "x", None), &[1, n], &col)?;
    }
    if let Some(b) = bg {
        let v: Vec<f64> = b.iter().copied().collect();
        crate::io::write_array_f64(&crate::io::bg_path(&dir.join("bg"), "x", None), &[1, n], &v)?;
    }
    w("raw/obs.csv", obs_csv)?;
    Ok(dir.join("main.prm"))
}
