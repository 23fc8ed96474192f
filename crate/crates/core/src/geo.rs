//! Rectangular lon/lat grid with z layers, and the "standard" observation
//! operators.
//!
//! Fields are row-major: a surface field is `[nj][ni]`, a volume field
//! `[nk][nj][ni]`. Fractional indices `(fi, fj, fk)` address cell centres
//! at integer values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::read_array;
use crate::prm::{resolve, GridConfig};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub name: String,
    pub ni: usize,
    pub nj: usize,
    pub nk: usize,
    pub lon: Vec<f64>,
    pub lat: Vec<f64>,
    /// Layer-centre depths, strictly increasing.
    pub z: Vec<f64>,
    /// `[nj][ni]`.
    pub depth: Vec<f64>,
    /// `[nj][ni]`; 0 marks land.
    pub numlevels: Vec<usize>,
    periodic_x: bool,
}

/// Fractional position of `v` on a strictly monotonic axis, or `None` when
/// outside. A single-point axis accepts only its own value.
fn axis_index(axis: &[f64], v: f64) -> Option<f64> {
    let n = axis.len();
    if n == 1 {
        return ((v - axis[0]).abs() <= 1e-9).then_some(0.0);
    }
    let inc = axis[n - 1] > axis[0];
    let (lo, hi) = if inc { (axis[0], axis[n - 1]) } else { (axis[n - 1], axis[0]) };
    if !(v >= lo && v <= hi) {
        return None;
    }
    let k = if inc {
        axis.partition_point(|&a| a <= v)
    } else {
        axis.partition_point(|&a| a >= v)
    };
    let i0 = k.saturating_sub(1).min(n - 2);
    let (a0, a1) = (axis[i0], axis[i0 + 1]);
    Some(i0 as f64 + (v - a0) / (a1 - a0))
}

fn strictly_monotonic(a: &[f64]) -> bool {
    a.windows(2).all(|w| w[1] > w[0]) || a.windows(2).all(|w| w[1] < w[0])
}

impl Grid {
    pub fn new(
        name: &str,
        lon: Vec<f64>,
        lat: Vec<f64>,
        z: Vec<f64>,
        depth: Vec<f64>,
        numlevels: Vec<usize>,
    ) -> Result<Self> {
        let (ni, nj, nk) = (lon.len(), lat.len(), z.len());
        if ni == 0 || nj == 0 || nk == 0 {
            return Err(Error::InvalidArgument("grid axes must be non-empty".into()));
        }
        if !strictly_monotonic(&lon) || !strictly_monotonic(&lat) {
            return Err(Error::InvalidArgument("grid lon/lat must be strictly monotonic".into()));
        }
        if !z.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("grid z must be strictly increasing".into()));
        }
        if depth.len() != ni * nj || numlevels.len() != ni * nj {
            return Err(Error::Shape(format!("depth and numlevels must be {nj} x {ni}")));
        }
        if numlevels.iter().any(|&l| l > nk) {
            return Err(Error::InvalidArgument(format!("numlevels exceeds nk = {nk}")));
        }
        let periodic_x = ni >= 2 && lon[ni - 1] > lon[0] && {
            let span = (lon[ni - 1] - lon[0]).abs();
            let cell = (lon[1] - lon[0]).abs().max((lon[ni - 1] - lon[ni - 2]).abs());
            let gap = 360.0 - span;
            gap > 0.0 && gap <= cell * (1.0 + 1e-9)
        };
        Ok(Grid {
            name: name.to_string(),
            ni,
            nj,
            nk,
            lon,
            lat,
            z,
            depth,
            numlevels,
            periodic_x,
        })
    }

    /// Single-layer grid of unit depth with every cell wet.
    pub fn surface(name: &str, lon: Vec<f64>, lat: Vec<f64>) -> Result<Self> {
        let n = lon.len() * lat.len();
        Self::new(name, lon, lat, vec![0.0], vec![1.0; n], vec![1; n])
    }

    pub fn load(cfg: &GridConfig, workdir: &Path) -> Result<Self> {
        let dir = resolve(workdir, &cfg.data);
        let read = |var: &str| -> Result<Vec<f64>> { Ok(read_array(&dir.join(format!("{var}.ekc")))?.to_f64()) };
        let lon = read(&cfg.xvarname)?;
        let lat = read(&cfg.yvarname)?;
        let z = read(&cfg.zvarname)?;
        let depth = read(&cfg.depthvarname)?;
        let numlevels = read(&cfg.numlevelsvarname)?
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::format(&dir, format!("{}: invalid level count {v}", cfg.numlevelsvarname)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(&cfg.name, lon, lat, z, depth, numlevels)
    }

    pub fn is_periodic_x(&self) -> bool {
        self.periodic_x
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.ni + i
    }

    pub fn numlevels_at(&self, i: usize, j: usize) -> usize {
        self.numlevels[self.cell(i, j)]
    }

    pub fn is_wet(&self, i: usize, j: usize) -> bool {
        self.numlevels_at(i, j) > 0
    }

    fn lon_index(&self, lon: f64) -> Option<f64> {
        let n = self.ni;
        let (lo, hi) = if self.lon[n - 1] > self.lon[0] {
            (self.lon[0], self.lon[n - 1])
        } else {
            (self.lon[n - 1], self.lon[0])
        };
        // Bring lon into [lo, lo + 360).
        let mut v = lon;
        if v.is_finite() {
            v = lo + (v - lo).rem_euclid(360.0);
        }
        if let Some(f) = axis_index(&self.lon, v) {
            return Some(f);
        }
        if !self.periodic_x {
            return None;
        }
        // Wrap cell between the last and first columns.
        let gap = lo + 360.0 - hi;
        Some((n - 1) as f64 + (v - hi) / gap)
    }

    /// Fractional indices of a location, or `None` when outside the grid.
    pub fn xy_to_fij(&self, lon: f64, lat: f64) -> Option<(f64, f64)> {
        let fj = axis_index(&self.lat, lat)?;
        let fi = self.lon_index(lon)?;
        Some((fi, fj))
    }

    fn axis_value(axis: &[f64], f: f64) -> f64 {
        let n = axis.len();
        if n == 1 {
            return axis[0];
        }
        let i0 = (f.floor().max(0.0) as usize).min(n - 2);
        let t = f - i0 as f64;
        axis[i0] + t * (axis[i0 + 1] - axis[i0])
    }

    pub fn fij_to_xy(&self, fi: f64, fj: f64) -> (f64, f64) {
        let n = self.ni;
        let lon = if self.periodic_x && fi > (n - 1) as f64 {
            let last = self.lon[n - 1];
            last + (fi - (n - 1) as f64) * (self.lon[0] + 360.0 - last)
        } else {
            Self::axis_value(&self.lon, fi)
        };
        (lon, Self::axis_value(&self.lat, fj))
    }

    /// Fractional layer index, clamped to `[0, nk - 1]`.
    pub fn z_to_fk(&self, depth: f64) -> f64 {
        let z = &self.z;
        let nk = z.len();
        if nk == 1 || depth <= z[0] {
            return 0.0;
        }
        if depth >= z[nk - 1] {
            return (nk - 1) as f64;
        }
        axis_index(z, depth).unwrap_or(0.0)
    }

    /// Whether `(fi, fj)` is inside the index domain. Only increasing
    /// longitudes are treated as periodic.
    pub fn contains_fij(&self, fi: f64, fj: f64) -> bool {
        let imax = if self.periodic_x { self.ni as f64 } else { (self.ni - 1) as f64 };
        fi >= 0.0 && fi <= imax && (!self.periodic_x || fi < imax) && fj >= 0.0 && fj <= (self.nj - 1) as f64
    }

    /// Column index pairs and weights along x.
    fn x_corners(&self, fi: f64) -> [(usize, f64); 2] {
        let ni = self.ni;
        let i0 = (fi.floor().max(0.0) as usize).min(ni - 1);
        let u = fi - i0 as f64;
        let i1 = if i0 + 1 < ni {
            i0 + 1
        } else if self.periodic_x {
            0
        } else {
            i0
        };
        [(i0, 1.0 - u), (i1, u)]
    }

    fn y_corners(&self, fj: f64) -> [(usize, f64); 2] {
        let nj = self.nj;
        let j0 = (fj.floor().max(0.0) as usize).min(nj - 1);
        let v = fj - j0 as f64;
        let j1 = (j0 + 1).min(nj - 1);
        [(j0, 1.0 - v), (j1, v)]
    }

    /// Horizontal interpolation weights `(cell, weight)` over the corners
    /// that hold at least `k + 1` levels, renormalised.
    pub fn horizontal_weights(&self, fi: f64, fj: f64, k: usize) -> Result<Vec<(usize, f64)>> {
        if !self.contains_fij(fi, fj) {
            return Err(Error::InvalidArgument(format!("location ({fi}, {fj}) is outside the grid")));
        }
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(4);
        let mut total = 0.0;
        for (j, wy) in self.y_corners(fj) {
            for (i, wx) in self.x_corners(fi) {
                let w = wx * wy;
                if w > 0.0 && self.numlevels_at(i, j) > k {
                    let c = self.cell(i, j);
                    match out.iter_mut().find(|(cc, _)| *cc == c) {
                        Some(e) => e.1 += w,
                        None => out.push((c, w)),
                    }
                    total += w;
                }
            }
        }
        if total <= 0.0 {
            return Err(Error::OnLand);
        }
        for e in &mut out {
            e.1 /= total;
        }
        Ok(out)
    }

    /// Bilinear interpolation of a `[nj][ni]` field.
    pub fn h_surface(&self, field: &[f64], fi: f64, fj: f64) -> Result<f64> {
        if field.len() != self.ni * self.nj {
            return Err(Error::Shape(format!("surface field must have {} values", self.ni * self.nj)));
        }
        Ok(self
            .horizontal_weights(fi, fj, 0)?
            .iter()
            .map(|&(c, w)| w * field[c])
            .sum())
    }

    /// Trilinear interpolation of a `[nk][nj][ni]` field.
    pub fn h_volume(&self, field: &[f64], fi: f64, fj: f64, fk: f64) -> Result<f64> {
        let plane = self.ni * self.nj;
        if field.len() != plane * self.nk {
            return Err(Error::Shape(format!("volume field must have {} values", plane * self.nk)));
        }
        let nk = self.nk;
        let fk = fk.clamp(0.0, (nk - 1) as f64);
        let k0 = (fk.floor() as usize).min(nk - 1);
        let t = fk - k0 as f64;
        let k1 = (k0 + 1).min(nk - 1);
        let mut acc = 0.0;
        let mut total = 0.0;
        for (k, wk) in [(k0, 1.0 - t), (k1, t)] {
            if wk <= 0.0 {
                continue;
            }
            match self.horizontal_weights(fi, fj, k) {
                Ok(ws) => {
                    let v: f64 = ws.iter().map(|&(c, w)| w * field[k * plane + c]).sum();
                    acc += wk * v;
                    total += wk;
                }
                Err(Error::OnLand) => {}
                Err(e) => return Err(e),
            }
        }
        if total <= 0.0 {
            return Err(Error::OnLand);
        }
        Ok(acc / total)
    }
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn great_circle_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}
