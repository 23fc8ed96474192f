//! Local analysis algebra.
//!
//! With `p` observations and `m` members, `S` is `p x m` (one row per
//! observation) and `s` has length `p`:
//!
//! ```text
//! s = (y - Hx) / (σ √(m-1)),   S = H A / (σ √(m-1)),   G = (I + SᵀS)⁻¹ Sᵀ
//! w = G s
//! X5 = 11ᵀ/m + (I - 11ᵀ/m)(w 1ᵀ + T_R)
//! ```
//!
//! so that `E^a = E^f X5` holds the analysed mean `x + A w` and anomalies
//! `A T_R`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::prm::Scheme;

/// Standardised innovations and ensemble observation anomalies.
#[derive(Debug, Clone, PartialEq)]
pub struct StdObs {
    pub s: DVector<f64>,
    /// `p x m`.
    pub s_mat: DMatrix<f64>,
}

impl StdObs {
    pub fn empty(m: usize) -> Self {
        StdObs {
            s: DVector::zeros(0),
            s_mat: DMatrix::zeros(0, m),
        }
    }

    pub fn p(&self) -> usize {
        self.s.len()
    }

    pub fn m(&self) -> usize {
        self.s_mat.ncols()
    }

    /// Rows `idx` scaled by the taper coefficients `f`.
    pub fn select_tapered(&self, idx: &[usize], f: &[f64]) -> StdObs {
        debug_assert_eq!(idx.len(), f.len());
        let m = self.m();
        let s = DVector::from_iterator(idx.len(), idx.iter().zip(f).map(|(&o, &c)| c * self.s[o]));
        let s_mat = DMatrix::from_fn(idx.len(), m, |r, j| f[r] * self.s_mat[(idx[r], j)]);
        StdObs { s, s_mat }
    }
}

/// Transform computed at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTransform {
    pub w: DVector<f64>,
    pub t_r: DMatrix<f64>,
    pub x5: DMatrix<f64>,
    pub dfs: f64,
    pub srf: f64,
}

impl LocalTransform {
    pub fn identity(m: usize) -> Self {
        LocalTransform {
            w: DVector::zeros(m),
            t_r: DMatrix::identity(m, m),
            x5: DMatrix::identity(m, m),
            dfs: 0.0,
            srf: 0.0,
        }
    }
}

/// Moderated observation error variance. All arguments except `d` and `k`
/// are variances.
pub fn moderate_obs_error(var_obs: f64, var_f: f64, d: f64, k: f64) -> f64 {
    let a = var_f + var_obs;
    (a * a + var_f * d * d / (k * k)).sqrt() - var_f
}

/// Effective observation error variance: R-factors first, then moderation
/// when `kfactor` is set.
pub fn effective_variance(std: f64, rfactor: f64, kfactor: Option<f64>, var_f: f64, d: f64) -> f64 {
    let var = std * std * rfactor;
    match kfactor {
        Some(k) if k > 0.0 => moderate_obs_error(var, var_f, d, k),
        _ => var,
    }
}

/// `s` and `S` from innovations `d`, ensemble observation anomalies
/// `ha` (`p x m`), effective error stds and taper coefficients.
pub fn standardize(d: &DVector<f64>, ha: &DMatrix<f64>, sigma: &[f64], taper: &[f64]) -> Result<StdObs> {
    let (p, m) = ha.shape();
    if d.len() != p || sigma.len() != p || taper.len() != p {
        return Err(Error::Shape("standardize: inconsistent observation counts".into()));
    }
    if m < 2 {
        return Err(Error::InvalidArgument("standardize: ensemble size < 2".into()));
    }
    if let Some(bad) = sigma.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!("observation error std {bad} must be positive")));
    }
    let sq = ((m - 1) as f64).sqrt();
    let scale: Vec<f64> = (0..p).map(|o| taper[o] / (sigma[o] * sq)).collect();
    let s = DVector::from_fn(p, |o, _| scale[o] * d[o]);
    let s_mat = DMatrix::from_fn(p, m, |o, j| scale[o] * ha[(o, j)]);
    Ok(StdObs { s, s_mat })
}

/// Ensemble observation anomalies: `he` minus its row means.
pub fn row_anomalies(he: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = he.column_mean();
    let mut a = he.clone();
    for mut c in a.column_iter_mut() {
        c -= &mean;
    }
    (mean, a)
}

/// `G` through the `m x m` system `(I + SᵀS)`.
pub fn gain_m_form(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = s.ncols();
    let st = s.transpose();
    let a = DMatrix::identity(m, m) + &st * s;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("Cholesky of I + SᵀS failed".into()))?;
    Ok(chol.solve(&st))
}

/// `G` through the `p x p` system `(I + SSᵀ)`.
pub fn gain_p_form(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = s.nrows();
    let a = DMatrix::identity(p, p) + s * s.transpose();
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Numerical("Cholesky of I + SSᵀ failed".into()))?;
    Ok(chol.solve(s).transpose())
}

/// `G = (I + SᵀS)⁻¹ Sᵀ`, through the smaller of the two systems.
pub fn compute_gain(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() >= s.ncols() {
        gain_m_form(s)
    } else {
        gain_p_form(s)
    }
}

/// `(I + α SᵀS)^{-1/2}`, eigenvalues of the bracket floored at 1.
pub fn etkf_tr(s: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let m = s.ncols();
    let sts = s.transpose() * s;
    let eig = (DMatrix::identity(m, m) + alpha * sts).symmetric_eigen();
    let v = &eig.eigenvectors;
    let d = DVector::from_iterator(m, eig.eigenvalues.iter().map(|&l| 1.0 / l.max(1.0).sqrt()));
    let t = v * DMatrix::from_diagonal(&d) * v.transpose();
    (&t + t.transpose()) * 0.5
}

/// `I - (α/2) G S`.
pub fn denkf_tr(g: &DMatrix<f64>, s: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let m = s.ncols();
    DMatrix::identity(m, m) - (alpha / 2.0) * g * s
}

/// `11ᵀ/m + (I - 11ᵀ/m)(w 1ᵀ + T_R)`.
pub fn assemble_x5(w: &DVector<f64>, t_r: &DMatrix<f64>) -> DMatrix<f64> {
    let m = w.len();
    let mut b = t_r.clone();
    for mut c in b.column_iter_mut() {
        c += w;
    }
    // (I - 11ᵀ/m) B subtracts column means.
    let means = b.row_mean();
    let inv_m = 1.0 / m as f64;
    DMatrix::from_fn(m, m, |i, j| b[(i, j)] - means[j] + inv_m)
}

/// `(dfs, srf)` from `S` and `G S`.
pub fn impact(s: &DMatrix<f64>, gs: &DMatrix<f64>) -> (f64, f64) {
    let dfs = gs.trace();
    let sts = s.iter().map(|v| v * v).sum::<f64>();
    let srf = if dfs > 0.0 { (sts / dfs).sqrt() - 1.0 } else { 0.0 };
    (dfs, srf)
}

pub fn compute_transform(obs: &StdObs, scheme: Scheme, alpha: f64) -> Result<LocalTransform> {
    let m = obs.m();
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} outside [0, 1]")));
    }
    if obs.p() == 0 {
        return Ok(LocalTransform::identity(m));
    }
    let s = &obs.s_mat;
    let g = compute_gain(s)?;
    let w = &g * &obs.s;
    let gs = &g * s;
    let t_r = match scheme {
        Scheme::Etkf => etkf_tr(s, alpha),
        Scheme::Denkf => DMatrix::identity(m, m) - (alpha / 2.0) * &gs,
    };
    let x5 = assemble_x5(&w, &t_r);
    let (dfs, srf) = impact(s, &gs);
    Ok(LocalTransform { w, t_r, x5, dfs, srf })
}

/// EnOI weights `w = G s` with `(dfs, srf)`.
pub fn enoi_weights(obs: &StdObs) -> Result<(DVector<f64>, f64, f64)> {
    let m = obs.m();
    if obs.p() == 0 {
        return Ok((DVector::zeros(m), 0.0, 0.0));
    }
    let g = compute_gain(&obs.s_mat)?;
    let w = &g * &obs.s;
    let (dfs, srf) = impact(&obs.s_mat, &(&g * &obs.s_mat));
    Ok((w, dfs, srf))
}

/// How ensemble observation anomalies are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HVariant {
    /// `H` applied to each member.
    Spread,
    /// `H` applied to `x + ε a_j`, anomalies divided by `ε`.
    FiniteDiff(f64),
}

/// Result of applying `H` to an ensemble; rows of failed observations are
/// zero and flagged in `ok`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleObs {
    /// `p x m`.
    pub he: DMatrix<f64>,
    pub ok: Vec<bool>,
}

/// `H` over an in-memory ensemble `e` (`n x m`); `h(state, o)` evaluates
/// observation `o` on a state vector.
pub fn ensemble_observations<H>(e: &DMatrix<f64>, p: usize, variant: HVariant, h: H) -> Result<EnsembleObs>
where
    H: Fn(&[f64], usize) -> Result<f64> + Sync,
{
    let (n, m) = e.shape();
    let x = e.column_mean();
    let cols: Vec<Vec<f64>> = match variant {
        HVariant::Spread => (0..m).map(|j| e.column(j).iter().copied().collect()).collect(),
        HVariant::FiniteDiff(eps) => {
            if !(eps > 0.0) {
                return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
            }
            (0..m)
                .map(|j| (0..n).map(|i| x[i] + eps * (e[(i, j)] - x[i])).collect())
                .collect()
        }
    };
    let rows: Vec<Option<Vec<f64>>> = (0..p)
        .into_par_iter()
        .map(|o| -> Result<Option<Vec<f64>>> {
            let mut row = Vec::with_capacity(m);
            for c in &cols {
                match h(c, o) {
                    Ok(v) => row.push(v),
                    Err(Error::OnLand) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            if let HVariant::FiniteDiff(eps) = variant {
                let hx = match h(x.as_slice(), o) {
                    Ok(v) => v,
                    Err(Error::OnLand) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let mean = row.iter().sum::<f64>() / m as f64;
                for v in &mut row {
                    *v = hx + (*v - mean) / eps;
                }
            }
            Ok(Some(row))
        })
        .collect::<Result<_>>()?;
    let ok: Vec<bool> = rows.iter().map(Option::is_some).collect();
    let he = DMatrix::from_fn(p, m, |o, j| rows[o].as_ref().map_or(0.0, |r| r[j]));
    Ok(EnsembleObs { he, ok })
}
