//! The update stage: applies transforms to fields, inflates, applies the
//! forgetting model and writes analyses, increments and spread.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::ensemble::spread_of;
use crate::error::{Error, Result};
use crate::geo::Grid;
use crate::io::{bg_path, member_path, read_array, write_array_f64};
use crate::locality::{Transform, TransformField};
use crate::prm::{DaConfig, Inflation, InflationCap, Mode};

/// Member values of one variable: `members[j]` is a flat `[nk?][nj][ni]` field.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberFields {
    pub dims: Vec<usize>,
    pub members: Vec<Vec<f64>>,
}

impl MemberFields {
    pub fn m(&self) -> usize {
        self.members.len()
    }

    pub fn levels(&self) -> usize {
        if self.dims.len() == 3 {
            self.dims[0]
        } else {
            1
        }
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        let plane = grid.ni * grid.nj;
        let ok = match self.dims.as_slice() {
            [nj, ni] => *nj == grid.nj && *ni == grid.ni,
            [nk, nj, ni] => *nk == grid.nk && *nj == grid.nj && *ni == grid.ni,
            _ => false,
        };
        if !ok || self.members.iter().any(|f| f.len() != plane * self.levels()) {
            return Err(Error::Shape(format!(
                "field dims {:?} do not match grid {} x {} x {}",
                self.dims, grid.nk, grid.nj, grid.ni
            )));
        }
        Ok(())
    }
}

/// Levels of cell `(i, j)` a field touches: all wet levels for volume
/// fields, level 0 for surface fields of wet cells.
fn wet_levels(grid: &Grid, f: &MemberFields, i: usize, j: usize) -> usize {
    let nl = grid.numlevels_at(i, j);
    if f.levels() == 1 {
        nl.min(1)
    } else {
        nl.min(f.levels())
    }
}

/// Updated member values `(element, values)` of one grid column.
type CellUpdate = (usize, Vec<(usize, Vec<f64>)>);

/// Applies the interpolated transform at every wet grid cell. EnKF: member
/// values times `X5`. EnOI: `anoms` holds the static anomalies and the single
/// background field in `f` is shifted by `A w`.
pub fn update_field(f: &mut MemberFields, grid: &Grid, tf: &TransformField, anoms: Option<&MemberFields>) -> Result<()> {
    f.check(grid)?;
    let plane = grid.ni * grid.nj;
    let m = tf.m;
    if tf.is_enkf() && f.m() != m {
        return Err(Error::Shape(format!("ensemble has {} members, transforms {m}", f.m())));
    }
    if let Some(a) = anoms {
        a.check(grid)?;
        if a.m() != m || f.m() != 1 || a.dims != f.dims {
            return Err(Error::Shape("EnOI update needs one background and m anomaly fields of equal dims".into()));
        }
    }
    let cells: Vec<CellUpdate> = (0..plane)
        .into_par_iter()
        .filter_map(|c| {
            let (i, j) = (c % grid.ni, c / grid.ni);
            let nl = wet_levels(grid, f, i, j);
            if nl == 0 {
                return None;
            }
            let t = tf.interp(i as f64, j as f64);
            let mut out = Vec::with_capacity(nl);
            for k in 0..nl {
                let e = k * plane + c;
                let vals = match (&t, anoms) {
                    (Transform::X5(x5), _) => {
                        let row: Vec<f64> = f.members.iter().map(|mem| mem[e]).collect();
                        crate::diag::analysed_row_enkf(&row, x5)
                    }
                    (Transform::W(w), Some(a)) => {
                        let inc: f64 = a.members.iter().zip(w.iter()).map(|(mem, wj)| mem[e] * wj).sum();
                        vec![f.members[0][e] + inc]
                    }
                    (Transform::W(_), None) => return Some(Err(Error::InvalidArgument("EnOI update needs anomalies".into()))),
                };
                out.push((e, vals));
            }
            Some(Ok((c, out)))
        })
        .collect::<Result<_>>()?;
    for (_, updates) in cells {
        for (e, vals) in updates {
            for (mem, v) in f.members.iter_mut().zip(vals) {
                mem[e] = v;
            }
        }
    }
    Ok(())
}

/// Effective inflation multiple: `min(mult, max(1, 1 + cap (σf/σa - 1)))`
/// when capped, `mult` when plain. A collapsed analysis (`σa = 0`) is left
/// alone (multiple 1).
pub fn capped_multiple(inf: Inflation, sigma_f: f64, sigma_a: f64) -> f64 {
    match inf.cap {
        InflationCap::Plain => inf.mult,
        InflationCap::Capped(cap) => {
            if !(sigma_a > 0.0) {
                return 1.0;
            }
            inf.mult.min((1.0 + cap * (sigma_f / sigma_a - 1.0)).max(1.0))
        }
    }
}

/// Inflates the analysed member values of one element around their mean;
/// returns the multiple applied.
pub fn inflate_element(forecast: &[f64], analysis: &mut [f64], inf: Inflation) -> f64 {
    if inf.mult == 1.0 {
        return 1.0;
    }
    let k = capped_multiple(inf, spread_of(forecast), spread_of(analysis));
    if k != 1.0 {
        let mean = analysis.iter().sum::<f64>() / analysis.len() as f64;
        for v in analysis.iter_mut() {
            *v = mean + k * (*v - mean);
        }
    }
    k
}

/// Inflates every wet element; returns the applied multiple per element
/// (1 on land).
pub fn inflate(forecast: &MemberFields, analysis: &mut MemberFields, grid: &Grid, inf: Inflation) -> Vec<f64> {
    let plane = grid.ni * grid.nj;
    let n = forecast.members[0].len();
    let mut mult = vec![1.0; n];
    if inf.mult == 1.0 {
        return mult;
    }
    let m = forecast.m();
    for c in 0..plane {
        let (i, j) = (c % grid.ni, c / grid.ni);
        for k in 0..wet_levels(grid, forecast, i, j) {
            let e = k * plane + c;
            let f: Vec<f64> = (0..m).map(|b| forecast.members[b][e]).collect();
            let mut a: Vec<f64> = (0..m).map(|b| analysis.members[b][e]).collect();
            mult[e] = inflate_element(&f, &mut a, inf);
            for (b, v) in a.into_iter().enumerate() {
                analysis.members[b][e] = v;
            }
        }
    }
    mult
}

/// `x <- λ x + sqrt(1 - λ²) N(0, σ0²)` per value.
pub fn randomise<R: Rng>(values: &mut [f64], lambda: f64, sigma0: f64, rng: &mut R) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidArgument(format!("RANDOMISE lambda {lambda} must lie in (0, 1]")));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma0).map_err(|e| Error::InvalidArgument(format!("RANDOMISE sigma: {e}")))?;
    let c = (1.0 - lambda * lambda).sqrt();
    for v in values.iter_mut() {
        *v = lambda * *v + c * normal.sample(rng);
    }
    Ok(())
}

/// Element-wise ensemble spread.
pub fn field_spread(f: &MemberFields) -> Vec<f64> {
    let n = f.members[0].len();
    (0..n)
        .map(|e| {
            let v: Vec<f64> = f.members.iter().map(|mem| mem[e]).collect();
            spread_of(&v)
        })
        .collect()
}

/// Number of consecutive member files `mem001_<var>.ekc`, `mem002_...`.
pub fn count_members(dir: &Path, var: &str) -> usize {
    (1..).take_while(|&k| member_path(dir, k, var, None).exists()).count()
}

pub fn read_members(dir: &Path, var: &str, m: usize, slot: Option<i32>) -> Result<MemberFields> {
    let mut dims = Vec::new();
    let mut members = Vec::with_capacity(m);
    for k in 1..=m {
        let a = read_array(&member_path(dir, k, var, slot))?;
        if k == 1 {
            dims = a.dims.clone();
        } else if a.dims != dims {
            return Err(Error::Shape(format!("member {k} of {var} has dims {:?}, expected {dims:?}", a.dims)));
        }
        members.push(a.to_f64());
    }
    Ok(MemberFields { dims, members })
}

pub fn read_background(dir: &Path, var: &str, slot: Option<i32>) -> Result<MemberFields> {
    let a = read_array(&bg_path(dir, var, slot))?;
    Ok(MemberFields {
        dims: a.dims.clone(),
        members: vec![a.to_f64()],
    })
}

/// Static anomalies of an ensemble.
pub fn anomalies(f: &MemberFields) -> MemberFields {
    let m = f.m() as f64;
    let n = f.members[0].len();
    let mean: Vec<f64> = (0..n).map(|e| f.members.iter().map(|mem| mem[e]).sum::<f64>() / m).collect();
    MemberFields {
        dims: f.dims.clone(),
        members: f
            .members
            .iter()
            .map(|mem| mem.iter().zip(&mean).map(|(v, x)| v - x).collect())
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateOptions {
    pub calculate_spread: bool,
    pub joint_output: bool,
    pub no_fields_write: bool,
    pub output_increment: bool,
    pub write_inflation: bool,
    /// Seed for the forgetting model.
    pub seed: u64,
}

/// Files written for one variable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    pub written: Vec<PathBuf>,
}

fn output_path(forecast: &Path, opts: &UpdateOptions) -> PathBuf {
    let suffix = if opts.output_increment { "increment" } else { "analysis" };
    if opts.joint_output {
        let name = forecast.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        let stem = name.trim_end_matches(".ekc");
        let tag = if opts.output_increment { "_inc" } else { "_an" };
        forecast.with_file_name(format!("{stem}{tag}.ekc"))
    } else {
        let mut s = forecast.as_os_str().to_os_string();
        s.push(format!(".{suffix}"));
        PathBuf::from(s)
    }
}

fn write_result(path: &Path, dims: &[usize], f: &[f64], a: &[f64], increment: bool) -> Result<()> {
    if increment {
        let inc: Vec<f64> = a.iter().zip(f).map(|(a, f)| a - f).collect();
        write_array_f64(path, dims, &inc)
    } else {
        write_array_f64(path, dims, a)
    }
}

/// Updates all model variables on disk.
pub fn update(cfg: &DaConfig, grid: &Grid, tf: &TransformField, opts: UpdateOptions) -> Result<UpdateReport> {
    let ensdir = cfg.main.ensdir.as_ref().map(|d| cfg.path(d));
    let mut report = UpdateReport::default();
    let results: Vec<Result<Vec<PathBuf>>> = cfg
        .model
        .vars
        .par_iter()
        .enumerate()
        .map(|(vi, var)| -> Result<Vec<PathBuf>> {
            let mut written = Vec::new();
            let ensdir = ensdir
                .as_ref()
                .ok_or_else(|| Error::Config("ENSDIR is required for the update".into()))?;
            let m = tf.m;
            let members = read_members(ensdir, &var.name, m, None)?;
            match cfg.main.mode {
                Mode::Enkf => {
                    let mut an = members.clone();
                    update_field(&mut an, grid, tf, None)?;
                    let mult = inflate(&members, &mut an, grid, cfg.inflation_for(&var.name));
                    if let Some(r) = var.randomise {
                        let mut rng = crate::models::member_rng(opts.seed ^ (vi as u64).wrapping_mul(0x9e37_79b9), 0);
                        for mem in an.members.iter_mut() {
                            randomise(mem, r.lambda, r.sigma0, &mut rng)?;
                        }
                    }
                    if !opts.no_fields_write {
                        for (k, (f, a)) in members.members.iter().zip(&an.members).enumerate() {
                            let p = output_path(&member_path(ensdir, k + 1, &var.name, None), &opts);
                            write_result(&p, &members.dims, f, a, opts.output_increment)?;
                            written.push(p);
                        }
                    }
                    if opts.calculate_spread {
                        for (tag, fld) in [("", &members), ("_an", &an)] {
                            let p = cfg.workdir.join(format!("spread_{}{tag}.ekc", var.name));
                            write_array_f64(&p, &fld.dims, &field_spread(fld))?;
                            written.push(p);
                        }
                    }
                    if opts.write_inflation {
                        let p = cfg.workdir.join(format!("inflation_{}.ekc", var.name));
                        write_array_f64(&p, &members.dims, &mult)?;
                        written.push(p);
                    }
                }
                Mode::Enoi => {
                    let bgdir = cfg.main.bgdir.as_ref().map(|d| cfg.path(d)).unwrap_or_else(|| cfg.workdir.clone());
                    let bg = read_background(&bgdir, &var.name, None)?;
                    let a = anomalies(&members);
                    let mut an = bg.clone();
                    update_field(&mut an, grid, tf, Some(&a))?;
                    if let Some(r) = var.randomise {
                        let mut rng = crate::models::member_rng(opts.seed ^ (vi as u64).wrapping_mul(0x9e37_79b9), 0);
                        randomise(&mut an.members[0], r.lambda, r.sigma0, &mut rng)?;
                    }
                    if !opts.no_fields_write {
                        let p = output_path(&bg_path(&bgdir, &var.name, None), &opts);
                        write_result(&p, &bg.dims, &bg.members[0], &an.members[0], opts.output_increment)?;
                        written.push(p);
                    }
                    if opts.calculate_spread {
                        let p = cfg.workdir.join(format!("spread_{}.ekc", var.name));
                        write_array_f64(&p, &members.dims, &field_spread(&members))?;
                        written.push(p);
                    }
                }
            }
            Ok(written)
        })
        .collect();
    for r in results {
        report.written.extend(r?);
    }
    Ok(report)
}

/// Whole-state `E X5` reference for a single transform; used to check the
/// field update.
pub fn apply_uniform(members: &[Vec<f64>], x5: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let n = members[0].len();
    let m = members.len();
    let e = DMatrix::from_fn(n, m, |i, j| members[j][i]);
    let a = e * x5;
    (0..m).map(|j| a.column(j).iter().copied().collect()).collect()
}

/// Analysed mean `x + A w` of a single element.
pub fn enoi_element(x: f64, a: &[f64], w: &DVector<f64>) -> f64 {
    x + a.iter().zip(w.iter()).map(|(a, w)| a * w).sum::<f64>()
}
