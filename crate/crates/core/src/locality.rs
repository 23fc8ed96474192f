//! Horizontal localisation: taper, local observation search, and the field
//! of local transforms computed on a strided subgrid.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::analysis::{compute_gain, compute_transform, enoi_weights, impact, LocalTransform, StdObs};
use crate::error::{Error, Result};
use crate::geo::{great_circle_km, Grid, EARTH_RADIUS_KM};
use crate::prm::{LocRad, Mode, Scheme};

/// Gaspari–Cohn quintic in `x = 2r/R`: 1 at 0, 0 from `x = 2` on.
pub fn gc_f0(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        let x2 = x * x;
        let x3 = x2 * x;
        1.0 - 5.0 / 3.0 * x2 + 5.0 / 8.0 * x3 + 0.5 * x2 * x2 - 0.25 * x3 * x2
    } else if x <= 2.0 {
        let x2 = x * x;
        let x3 = x2 * x;
        -2.0 / 3.0 / x + 4.0 - 5.0 * x + 5.0 / 3.0 * x2 + 5.0 / 8.0 * x3 - 0.5 * x2 * x2 + x3 * x2 / 12.0
    } else {
        0.0
    }
}

/// `Σ w_i f0(2r/R_i)`, clamped to `[0, 1]` against round-off near the support edge.
pub fn taper(r_km: f64, spec: &LocRad) -> f64 {
    spec.radii
        .iter()
        .zip(&spec.weights)
        .map(|(&rad, &w)| w * gc_f0(2.0 * r_km / rad))
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

fn unit_vector(lon: f64, lat: f64) -> [f64; 3] {
    let (lo, la) = (lon.to_radians(), lat.to_radians());
    [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
}

/// Static 3-d tree over unit vectors, median-split in place.
#[derive(Debug, Clone)]
struct KdTree {
    pts: Vec<[f64; 3]>,
    idx: Vec<usize>,
}

impl KdTree {
    fn new(pts: Vec<[f64; 3]>) -> Self {
        let mut idx: Vec<usize> = (0..pts.len()).collect();
        Self::build(&pts, &mut idx, 0);
        KdTree { pts, idx }
    }

    fn build(pts: &[[f64; 3]], idx: &mut [usize], depth: usize) {
        if idx.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let (lo, hi) = idx.split_at_mut(mid);
        Self::build(pts, lo, depth + 1);
        Self::build(pts, &mut hi[1..], depth + 1);
    }

    fn within(&self, q: &[f64; 3], r: f64, out: &mut Vec<usize>) {
        self.visit(&self.idx, q, r * r, 0, out);
    }

    fn visit(&self, idx: &[usize], q: &[f64; 3], r2: f64, depth: usize, out: &mut Vec<usize>) {
        if idx.is_empty() {
            return;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        let p = &self.pts[idx[mid]];
        let d2: f64 = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum();
        if d2 <= r2 {
            out.push(idx[mid]);
        }
        let diff = q[axis] - p[axis];
        let (near, far) = if diff <= 0.0 {
            (&idx[..mid], &idx[mid + 1..])
        } else {
            (&idx[mid + 1..], &idx[..mid])
        };
        self.visit(near, q, r2, depth + 1, out);
        if diff * diff <= r2 {
            self.visit(far, q, r2, depth + 1, out);
        }
    }
}

/// Finds observations with a positive taper coefficient around a location.
/// Each observation carries its own localisation (`None`: not localised).
#[derive(Debug, Clone)]
pub struct ObsLocator {
    lon: Vec<f64>,
    lat: Vec<f64>,
    spec: Vec<usize>,
    specs: Vec<Option<LocRad>>,
    max_radius: Option<f64>,
    tree: Option<KdTree>,
}

impl ObsLocator {
    /// `spec[o]` indexes `specs`. With `use_index` a k-d tree prunes the
    /// search; the result is identical to the brute-force scan.
    pub fn new(lon: Vec<f64>, lat: Vec<f64>, spec: Vec<usize>, specs: Vec<Option<LocRad>>, use_index: bool) -> Self {
        assert!(lon.len() == lat.len() && lat.len() == spec.len());
        let localised_all = spec.iter().all(|&s| specs[s].is_some());
        let max_radius = if localised_all {
            Some(
                spec.iter()
                    .filter_map(|&s| specs[s].as_ref().map(LocRad::max_radius))
                    .fold(0.0, f64::max),
            )
        } else {
            None
        };
        let tree = (use_index && max_radius.is_some())
            .then(|| KdTree::new(lon.iter().zip(&lat).map(|(&x, &y)| unit_vector(x, y)).collect()));
        ObsLocator {
            lon,
            lat,
            spec,
            specs,
            max_radius,
            tree,
        }
    }

    pub fn len(&self) -> usize {
        self.lon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lon.is_empty()
    }

    fn coeff(&self, o: usize, lon: f64, lat: f64) -> f64 {
        match &self.specs[self.spec[o]] {
            None => 1.0,
            Some(l) => taper(great_circle_km(lon, lat, self.lon[o], self.lat[o]), l),
        }
    }

    /// `(observation, taper coefficient)` pairs with coefficient > 0,
    /// ascending by observation index.
    pub fn select(&self, lon: f64, lat: f64) -> Vec<(usize, f64)> {
        let candidates: Vec<usize> = match (&self.tree, self.max_radius) {
            (Some(tree), Some(rmax)) => {
                let theta = rmax / EARTH_RADIUS_KM;
                if theta >= std::f64::consts::PI {
                    (0..self.len()).collect()
                } else {
                    let chord = 2.0 * (theta / 2.0).sin() * (1.0 + 1e-9) + 1e-12;
                    let mut c = Vec::new();
                    tree.within(&unit_vector(lon, lat), chord, &mut c);
                    c.sort_unstable();
                    c
                }
            }
            _ => (0..self.len()).collect(),
        };
        candidates
            .into_iter()
            .filter_map(|o| {
                let f = self.coeff(o, lon, lat);
                (f > 0.0).then_some((o, f))
            })
            .collect()
    }
}

/// Stride-node layout along one axis of `n` points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stride {
    pub n: usize,
    pub stride: usize,
}

impl Stride {
    pub fn nodes(&self) -> usize {
        (self.n - 1).div_ceil(self.stride) + 1
    }

    /// Grid index of node `k`; the last node is clamped to the edge.
    pub fn pos(&self, k: usize) -> usize {
        (k * self.stride).min(self.n - 1)
    }

    /// Up to two `(node, weight)` pairs for fractional index `f`. With
    /// `periodic`, `f` in `(n - 1, n)` blends the last and first nodes.
    fn weights(&self, f: f64, periodic: bool) -> [(usize, f64); 2] {
        let ns = self.nodes();
        if ns == 1 {
            return [(0, 1.0), (0, 0.0)];
        }
        let last = (self.n - 1) as f64;
        if periodic && f > last {
            let t = f - last;
            return [(ns - 1, 1.0 - t), (0, t)];
        }
        let f = f.clamp(0.0, last);
        let k0 = ((f / self.stride as f64).floor() as usize).min(ns - 2);
        let (p0, p1) = (self.pos(k0) as f64, self.pos(k0 + 1) as f64);
        let t = (f - p0) / (p1 - p0);
        [(k0, 1.0 - t), (k0 + 1, t)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeData {
    /// EnKF transforms, `m x m` per node.
    X5(Vec<DMatrix<f64>>),
    /// EnOI weights, length `m` per node.
    W(Vec<DVector<f64>>),
}

/// Local transforms at stride nodes, row-major `[nj_s][ni_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformField {
    pub xs: Stride,
    pub ys: Stride,
    pub periodic_x: bool,
    pub m: usize,
    pub data: NodeData,
    pub dfs: Vec<f64>,
    pub srf: Vec<f64>,
    /// `[type][node]`.
    pub dfs_by_type: Vec<Vec<f64>>,
    pub srf_by_type: Vec<Vec<f64>>,
}

/// Interpolated transform at one location.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    X5(DMatrix<f64>),
    W(DVector<f64>),
}

impl TransformField {
    pub fn ni_s(&self) -> usize {
        self.xs.nodes()
    }

    pub fn nj_s(&self) -> usize {
        self.ys.nodes()
    }

    pub fn node_count(&self) -> usize {
        self.ni_s() * self.nj_s()
    }

    pub fn node(&self, is: usize, js: usize) -> usize {
        js * self.ni_s() + is
    }

    pub fn is_enkf(&self) -> bool {
        matches!(self.data, NodeData::X5(_))
    }

    /// Identity field: `X5 = I` (EnKF) or `w = 0` (EnOI).
    pub fn identity(grid: &Grid, stride: usize, m: usize, enkf: bool, ntypes: usize) -> Self {
        let xs = Stride { n: grid.ni, stride };
        let ys = Stride { n: grid.nj, stride };
        let nn = xs.nodes() * ys.nodes();
        let data = if enkf {
            NodeData::X5(vec![DMatrix::identity(m, m); nn])
        } else {
            NodeData::W(vec![DVector::zeros(m); nn])
        };
        TransformField {
            xs,
            ys,
            periodic_x: grid.is_periodic_x(),
            m,
            data,
            dfs: vec![0.0; nn],
            srf: vec![0.0; nn],
            dfs_by_type: vec![vec![0.0; nn]; ntypes],
            srf_by_type: vec![vec![0.0; nn]; ntypes],
        }
    }

    /// Non-zero `(node, weight)` pairs for a fractional grid location.
    pub fn interp_weights(&self, fi: f64, fj: f64) -> Vec<(usize, f64)> {
        let wx = self.xs.weights(fi, self.periodic_x);
        let wy = self.ys.weights(fj, false);
        let mut out = Vec::with_capacity(4);
        for &(js, b) in &wy {
            for &(is, a) in &wx {
                let w = a * b;
                if w != 0.0 {
                    out.push((self.node(is, js), w));
                }
            }
        }
        out
    }

    /// Bilinear interpolation of node transforms. Exact node values are
    /// returned bitwise when only one distinct node contributes.
    pub fn interp(&self, fi: f64, fj: f64) -> Transform {
        let ws = self.interp_weights(fi, fj);
        match &self.data {
            NodeData::X5(v) => {
                if ws.iter().all(|&(k, _)| v[k] == v[ws[0].0]) {
                    return Transform::X5(v[ws[0].0].clone());
                }
                let mut acc = DMatrix::zeros(self.m, self.m);
                for &(k, w) in &ws {
                    acc += w * &v[k];
                }
                Transform::X5(acc)
            }
            NodeData::W(v) => {
                if ws.iter().all(|&(k, _)| v[k] == v[ws[0].0]) {
                    return Transform::W(v[ws[0].0].clone());
                }
                let mut acc = DVector::zeros(self.m);
                for &(k, w) in &ws {
                    acc += w * &v[k];
                }
                Transform::W(acc)
            }
        }
    }
}

/// Everything a local analysis needs beyond the location.
pub struct LocalAnalysis<'a> {
    /// Untapered standardised quantities for all assimilated observations.
    pub obs: &'a StdObs,
    pub locator: &'a ObsLocator,
    /// Type index per observation.
    pub obs_type: &'a [usize],
    pub ntypes: usize,
    pub mode: Mode,
    pub scheme: Scheme,
    pub alpha: f64,
    /// Forces `w = 0`.
    pub no_mean_update: bool,
}

/// Result of one local analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub transform: LocalTransform,
    /// `(observation, taper coefficient)`.
    pub local: Vec<(usize, f64)>,
    pub local_obs: StdObs,
    pub dfs_by_type: Vec<f64>,
    pub srf_by_type: Vec<f64>,
}

impl LocalAnalysis<'_> {
    pub fn m(&self) -> usize {
        self.obs.m()
    }

    pub fn at(&self, lon: f64, lat: f64) -> Result<LocalResult> {
        let m = self.m();
        let local = self.locator.select(lon, lat);
        let idx: Vec<usize> = local.iter().map(|&(o, _)| o).collect();
        let f: Vec<f64> = local.iter().map(|&(_, c)| c).collect();
        let lobs = self.obs.select_tapered(&idx, &f);
        let mut t = match self.mode {
            Mode::Enkf => compute_transform(&lobs, self.scheme, self.alpha)?,
            Mode::Enoi => {
                let (w, dfs, srf) = enoi_weights(&lobs)?;
                LocalTransform {
                    w,
                    t_r: DMatrix::identity(m, m),
                    x5: DMatrix::identity(m, m),
                    dfs,
                    srf,
                }
            }
        };
        if self.no_mean_update && lobs.p() > 0 {
            t.w = DVector::zeros(m);
            if self.mode == Mode::Enkf {
                t.x5 = crate::analysis::assemble_x5(&t.w, &t.t_r);
            }
        }
        let mut dfs_by_type = vec![0.0; self.ntypes];
        let mut srf_by_type = vec![0.0; self.ntypes];
        if lobs.p() > 0 {
            for ty in 0..self.ntypes {
                let rows: Vec<usize> = (0..idx.len()).filter(|&r| self.obs_type[idx[r]] == ty).collect();
                if rows.is_empty() {
                    continue;
                }
                let ones = vec![1.0; rows.len()];
                let sub = lobs.select_tapered(&rows, &ones);
                let g = compute_gain(&sub.s_mat)?;
                let (d, s) = impact(&sub.s_mat, &(&g * &sub.s_mat));
                dfs_by_type[ty] = d;
                srf_by_type[ty] = s;
            }
        }
        Ok(LocalResult {
            transform: t,
            local,
            local_obs: lobs,
            dfs_by_type,
            srf_by_type,
        })
    }
}

/// Local transforms at every stride node; land nodes get identity.
pub fn build_transform_field(grid: &Grid, stride: usize, la: &LocalAnalysis) -> Result<TransformField> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let m = la.m();
    let enkf = la.mode == Mode::Enkf;
    let mut field = TransformField::identity(grid, stride, m, enkf, la.ntypes);
    let (ni_s, nj_s) = (field.ni_s(), field.nj_s());
    let results: Vec<Option<LocalResult>> = (0..ni_s * nj_s)
        .into_par_iter()
        .map(|k| -> Result<Option<LocalResult>> {
            let (is, js) = (k % ni_s, k / ni_s);
            let (i, j) = (field.xs.pos(is), field.ys.pos(js));
            if !grid.is_wet(i, j) {
                return Ok(None);
            }
            let (lon, lat) = (grid.lon[i], grid.lat[j]);
            la.at(lon, lat)
                .map(Some)
                .map_err(|e| Error::Node { i, j, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    for (k, r) in results.into_iter().enumerate() {
        let Some(r) = r else { continue };
        match &mut field.data {
            NodeData::X5(v) => v[k] = r.transform.x5,
            NodeData::W(v) => v[k] = r.transform.w,
        }
        field.dfs[k] = r.transform.dfs;
        field.srf[k] = r.transform.srf;
        for ty in 0..la.ntypes {
            field.dfs_by_type[ty][k] = r.dfs_by_type[ty];
            field.srf_by_type[ty][k] = r.srf_by_type[ty];
        }
    }
    Ok(field)
}
