//! Persistent formats: the EKC1 array container, observation tables,
//! point logs, transform files and ensemble file naming.
//!
//! EKC1 layout: `b"EKC1"`, header length as little-endian `u32`, a UTF-8
//! JSON header `{"dims":[..],"dtype":"f32"}`, then the row-major payload as
//! little-endian `f32`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Grid;
use crate::locality::{NodeData, TransformField};

const MAGIC: &[u8; 4] = b"EKC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dims: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArrayFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_dims(&dims, data.len())?;
        Ok(ArrayFile { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn check_dims(dims: &[usize], len: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::Shape("array must have at least one dimension".into()));
    }
    if dims.contains(&0) {
        return Err(Error::Shape("empty dimension".into()));
    }
    let n: usize = dims.iter().product();
    if n != len {
        return Err(Error::Shape(format!("dims {dims:?} hold {n} values, payload has {len}")));
    }
    Ok(())
}

pub fn encode_array(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    check_dims(dims, data.len())?;
    let header = serde_json::to_vec(&Header {
        dims: dims.to_vec(),
        dtype: "f32".into(),
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8], path: &Path) -> Result<ArrayFile> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not an EKC1 file (magic mismatch)"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(path, format!("unsupported dtype \"{}\"", header.dtype)));
    }
    if header.dims.contains(&0) {
        return Err(Error::format(path, "empty dimension"));
    }
    let n: usize = header.dims.iter().product();
    let payload = &bytes[8 + hlen..];
    if payload.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("truncated payload: expected {} bytes, found {}", 4 * n, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(ArrayFile { dims: header.dims, data })
}

pub fn write_array(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_array(dims, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_array_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let v: Vec<f32> = data.iter().map(|&x| x as f32).collect();
    write_array(path, dims, &v)
}

pub fn read_array(path: &Path) -> Result<ArrayFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes, path)
}

fn slot_suffix(slot: Option<i32>) -> String {
    slot.map(|s| format!("_{s}")).unwrap_or_default()
}

/// `mem%03d_<var>[_<slot>].ekc`; members are numbered from 1.
pub fn member_path(dir: &Path, member: usize, var: &str, slot: Option<i32>) -> PathBuf {
    debug_assert!(member >= 1);
    dir.join(format!("mem{member:03}_{var}{}.ekc", slot_suffix(slot)))
}

/// `bg_<var>[_<slot>].ekc`.
pub fn bg_path(dir: &Path, var: &str, slot: Option<i32>) -> PathBuf {
    dir.join(format!("bg_{var}{}.ekc", slot_suffix(slot)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ObsStatus {
    Good,
    Bad,
    Outside,
}

/// One row of an observation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: usize,
    #[serde(rename = "type")]
    pub obstype: String,
    pub product: String,
    pub instrument: String,
    pub batch: i64,
    pub lon: f64,
    pub lat: f64,
    pub depth: f64,
    pub fi: f64,
    pub fj: f64,
    pub fk: f64,
    pub value: f64,
    pub std: f64,
    pub time: f64,
    pub status: ObsStatus,
}

impl Observation {
    pub fn is_good(&self) -> bool {
        self.status == ObsStatus::Good
    }
}

pub fn write_obs(path: &Path, obs: &[Observation]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record([
        "id", "type", "product", "instrument", "batch", "lon", "lat", "depth", "fi", "fj", "fk", "value", "std",
        "time", "status",
    ])?;
    for o in obs {
        w.serialize(o)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_obs(path: &Path) -> Result<Vec<Observation>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let o: Observation = row.map_err(|e| Error::format(path, e.to_string()))?;
        out.push(o);
    }
    Ok(out)
}

/// Per-type attributes echoed into a point log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLogType {
    pub name: String,
    pub rfactor: f64,
    pub locrad: Vec<f64>,
    pub locweight: Vec<f64>,
}

/// Forecast and analysed member values of one variable at the log location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLogVar {
    pub name: String,
    /// `[nk][m]`; a single row for surface fields.
    pub forecast: Vec<Vec<f64>>,
    pub analysis: Option<Vec<Vec<f64>>>,
    /// `(mult, cap)`; cap is `None` for PLAIN.
    pub inflation: (f64, Option<f64>),
}

/// Everything entering one local analysis. `S` is `[m][p]`, the transforms `[m][m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLogRecord {
    pub date: f64,
    pub i: usize,
    pub j: usize,
    pub lon: f64,
    pub lat: f64,
    pub depth: f64,
    pub mode: String,
    pub scheme: String,
    pub alpha: f64,
    pub m: usize,
    pub p: usize,
    pub obs_types: Vec<PointLogType>,
    pub obs_ids: Vec<usize>,
    pub lcoeffs: Vec<f64>,
    pub obs_lon: Vec<f64>,
    pub obs_lat: Vec<f64>,
    pub obs_depth: Vec<f64>,
    pub obs_val: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub obs_fi: Vec<f64>,
    pub obs_fj: Vec<f64>,
    pub obs_fk: Vec<f64>,
    pub obs_type: Vec<usize>,
    pub obs_date: Vec<f64>,
    pub s: Vec<f64>,
    #[serde(rename = "S")]
    pub s_mat: Vec<Vec<f64>>,
    /// EnKF: transform computed at this location; EnOI: empty.
    #[serde(rename = "X5")]
    pub x5: Vec<Vec<f64>>,
    /// Interpolated transform actually applied here.
    #[serde(rename = "X5_actual")]
    pub x5_actual: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub w_actual: Vec<f64>,
    pub vars: Vec<PointLogVar>,
}

impl PointLogRecord {
    pub fn file_name(i: usize, j: usize) -> String {
        format!("pointlog_{i},{j}.json")
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p;
        let per_obs = [
            self.obs_ids.len(),
            self.lcoeffs.len(),
            self.obs_lon.len(),
            self.obs_lat.len(),
            self.obs_depth.len(),
            self.obs_val.len(),
            self.obs_std.len(),
            self.obs_fi.len(),
            self.obs_fj.len(),
            self.obs_fk.len(),
            self.obs_type.len(),
            self.obs_date.len(),
            self.s.len(),
        ];
        if per_obs.iter().any(|&n| n != p) {
            return Err(Error::Shape(format!("point log: per-observation arrays must have length p = {p}")));
        }
        if self.s_mat.len() != self.m || self.s_mat.iter().any(|r| r.len() != p) {
            return Err(Error::Shape(format!("point log: S must be {} x {p}", self.m)));
        }
        for (name, t) in [("X5", &self.x5), ("X5_actual", &self.x5_actual)] {
            if !t.is_empty() && (t.len() != self.m || t.iter().any(|r| r.len() != self.m)) {
                return Err(Error::Shape(format!("point log: {name} must be {0} x {0}", self.m)));
            }
        }
        for (name, w) in [("w", &self.w), ("w_actual", &self.w_actual)] {
            if !w.is_empty() && w.len() != self.m {
                return Err(Error::Shape(format!("point log: {name} must have length {}", self.m)));
            }
        }
        Ok(())
    }
}

pub fn write_pointlog(path: &Path, rec: &PointLogRecord) -> Result<()> {
    rec.validate()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, rec)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_pointlog(path: &Path) -> Result<PointLogRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rec: PointLogRecord = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    rec.validate()?;
    Ok(rec)
}

/// `X5.ekc` as `[nj_s, ni_s, m, m]` or `w.ekc` as `[nj_s, ni_s, m]`.
pub fn write_transforms(path: &Path, field: &TransformField) -> Result<()> {
    let (ni_s, nj_s, m) = (field.ni_s(), field.nj_s(), field.m);
    match &field.data {
        NodeData::X5(v) => {
            let mut data = Vec::with_capacity(v.len() * m * m);
            for x5 in v {
                for a in 0..m {
                    for b in 0..m {
                        data.push(x5[(a, b)] as f32);
                    }
                }
            }
            write_array(path, &[nj_s, ni_s, m, m], &data)
        }
        NodeData::W(v) => {
            let data: Vec<f32> = v.iter().flat_map(|w| w.iter().map(|&x| x as f32)).collect();
            write_array(path, &[nj_s, ni_s, m], &data)
        }
    }
}

/// Reads a transform file written for `grid` with `stride`. Impact
/// fields are not part of the file and come back as zeros.
pub fn read_transforms(path: &Path, grid: &Grid, stride: usize, ntypes: usize) -> Result<TransformField> {
    let arr = read_array(path)?;
    let enkf = arr.dims.len() == 4;
    let m = *arr.dims.last().expect("non-empty dims");
    let mut field = TransformField::identity(grid, stride, m, enkf, ntypes);
    let expect: Vec<usize> = if enkf {
        vec![field.nj_s(), field.ni_s(), m, m]
    } else {
        vec![field.nj_s(), field.ni_s(), m]
    };
    if arr.dims != expect {
        return Err(Error::format(
            path,
            format!("transform dims {:?} do not match grid and stride (expected {expect:?})", arr.dims),
        ));
    }
    match &mut field.data {
        NodeData::X5(v) => {
            for (k, x5) in v.iter_mut().enumerate() {
                let base = k * m * m;
                *x5 = DMatrix::from_fn(m, m, |a, b| f64::from(arr.data[base + a * m + b]));
            }
        }
        NodeData::W(v) => {
            for (k, w) in v.iter_mut().enumerate() {
                *w = DVector::from_fn(m, |a, _| f64::from(arr.data[k * m + a]));
            }
        }
    }
    Ok(field)
}

/// Impact diagnostics as `[1 + ntypes, 2, nj_s, ni_s]`: layer 0 holds all
/// observations, layer `1 + t` type `t`; the second index is DFS, SRF.
pub fn write_diag(path: &Path, field: &TransformField) -> Result<()> {
    let ntypes = field.dfs_by_type.len();
    let mut data: Vec<f64> = Vec::with_capacity((1 + ntypes) * 2 * field.node_count());
    data.extend(&field.dfs);
    data.extend(&field.srf);
    for t in 0..ntypes {
        data.extend(&field.dfs_by_type[t]);
        data.extend(&field.srf_by_type[t]);
    }
    write_array_f64(path, &[1 + ntypes, 2, field.nj_s(), field.ni_s()], &data)
}
