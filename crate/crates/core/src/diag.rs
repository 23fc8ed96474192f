//! Diagnostics: analysed observations, innovation statistics, bad-batch
//! detection and point-log assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Observation;
use crate::locality::Transform;
use crate::prm::{BadBatchSpec, DaConfig, ObsTypeSpec, Region};

/// EnKF: one row of `H(E^a) = H(E^f) X5`.
pub fn analysed_row_enkf(he_f: &[f64], x5: &DMatrix<f64>) -> Vec<f64> {
    let m = he_f.len();
    (0..m).map(|b| (0..m).map(|a| he_f[a] * x5[(a, b)]).sum()).collect()
}

/// EnOI: one row of `H(E^a) = [H(x^f) + (HA) w] 1ᵀ + HA`.
pub fn analysed_row_enoi(hx: f64, ha: &[f64], w: &DVector<f64>) -> Vec<f64> {
    let shift = hx + ha.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
    ha.iter().map(|a| shift + a).collect()
}

/// Analysed ensemble observations given the transform interpolated at each
/// observation. For EnKF `he_f` holds member values; for EnOI it holds the
/// static anomalies and `hx` the background values.
pub fn analysed_obs(he_f: &DMatrix<f64>, hx: Option<&DVector<f64>>, transforms: &[Transform]) -> Result<DMatrix<f64>> {
    let (p, m) = he_f.shape();
    if transforms.len() != p {
        return Err(Error::Shape(format!("need {p} transforms, got {}", transforms.len())));
    }
    let mut out = DMatrix::zeros(p, m);
    for (o, t) in transforms.iter().enumerate() {
        let row: Vec<f64> = he_f.row(o).iter().copied().collect();
        let a = match (t, hx) {
            (Transform::X5(x5), _) => analysed_row_enkf(&row, x5),
            (Transform::W(w), Some(hx)) => analysed_row_enoi(hx[o], &row, w),
            (Transform::W(_), None) => return Err(Error::InvalidArgument("EnOI analysed observations need H(x)".into())),
        };
        for (b, v) in a.into_iter().enumerate() {
            out[(o, b)] = v;
        }
    }
    Ok(out)
}

/// Which misfit measure the statistics report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Mad,
    Rmsd,
}

/// Sub-grouping of a statistics row within a region and type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StatGroup {
    All,
    Slot(i32),
    Instrument(String),
    Depth(f64, f64),
}

impl StatGroup {
    pub fn label(&self) -> String {
        match self {
            StatGroup::All => String::new(),
            StatGroup::Slot(s) => format!("{s}"),
            StatGroup::Instrument(s) => s.clone(),
            StatGroup::Depth(a, b) if b.is_infinite() => format!(">{a}m"),
            StatGroup::Depth(a, b) => format!("{a}-{b}m"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub region: String,
    pub obstype: String,
    pub group: StatGroup,
    pub n: usize,
    /// MAD or RMSD of forecast innovations.
    pub inn_f: f64,
    pub inn_a: Option<f64>,
    pub bias_f: f64,
    pub bias_a: Option<f64>,
    pub spread_f: f64,
    pub spread_a: Option<f64>,
}

/// Per-observation quantities the statistics are built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsMoments {
    /// `y - mean(H(E^f))`.
    pub inn_f: Vec<f64>,
    pub inn_a: Option<Vec<f64>>,
    pub spread_f: Vec<f64>,
    pub spread_a: Option<Vec<f64>>,
}

fn row_moments(he: &DMatrix<f64>, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = he.ncols() as f64;
    let mut inn = Vec::with_capacity(he.nrows());
    let mut spr = Vec::with_capacity(he.nrows());
    for (o, r) in he.row_iter().enumerate() {
        let mean = r.sum() / m;
        let var = if m < 2.0 { 0.0 } else { r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) };
        inn.push(y[o] - mean);
        spr.push(var.sqrt());
    }
    (inn, spr)
}

impl ObsMoments {
    pub fn new(obs: &[Observation], he_f: &DMatrix<f64>, he_a: Option<&DMatrix<f64>>) -> Self {
        let y: Vec<f64> = obs.iter().map(|o| o.value).collect();
        let (inn_f, spread_f) = row_moments(he_f, &y);
        let (inn_a, spread_a) = match he_a {
            Some(a) => {
                let (i, s) = row_moments(a, &y);
                (Some(i), Some(s))
            }
            None => (None, None),
        };
        ObsMoments {
            inn_f,
            inn_a,
            spread_f,
            spread_a,
        }
    }
}

fn misfit(v: &[f64], metric: Metric) -> f64 {
    let n = v.len() as f64;
    match metric {
        Metric::Mad => v.iter().map(|x| x.abs()).sum::<f64>() / n,
        Metric::Rmsd => (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn make_row(region: &str, obstype: &str, group: StatGroup, idx: &[usize], mo: &ObsMoments, metric: Metric) -> StatRow {
    let pick = |v: &[f64]| idx.iter().map(|&o| v[o]).collect::<Vec<f64>>();
    let f = pick(&mo.inn_f);
    let a = mo.inn_a.as_deref().map(pick);
    StatRow {
        region: region.to_string(),
        obstype: obstype.to_string(),
        group,
        n: idx.len(),
        inn_f: misfit(&f, metric),
        inn_a: a.as_deref().map(|a| misfit(a, metric)),
        bias_f: mean(&f),
        bias_a: a.as_deref().map(mean),
        spread_f: mean(&pick(&mo.spread_f)),
        spread_a: mo.spread_a.as_deref().map(|s| mean(&pick(s))),
    }
}

/// Statistics rows grouped region, type, then slot (asynchronous types
/// only), instrument and depth interval (volume types only).
pub fn innovation_stats(
    obs: &[Observation],
    mo: &ObsMoments,
    types: &[ObsTypeSpec],
    regions: &[Region],
    zints: &[(f64, f64)],
    date: f64,
    metric: Metric,
) -> Vec<StatRow> {
    let mut rows = Vec::new();
    for region in regions {
        let zints = if region.zints.is_empty() { zints } else { &region.zints };
        for t in types {
            let idx: Vec<usize> = (0..obs.len())
                .filter(|&o| obs[o].obstype == t.name && region.contains(obs[o].lon, obs[o].lat))
                .collect();
            if idx.is_empty() {
                continue;
            }
            rows.push(make_row(&region.name, &t.name, StatGroup::All, &idx, mo, metric));
            if t.is_async() {
                let mut slots: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
                for &o in &idx {
                    slots.entry(crate::obsprep::slot_of(&obs[o], t, date)).or_default().push(o);
                }
                for (s, v) in slots {
                    rows.push(make_row(&region.name, &t.name, StatGroup::Slot(s), &v, mo, metric));
                }
            }
            let mut insts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for &o in &idx {
                let name = if obs[o].instrument == "-1" { "N/A".to_string() } else { obs[o].instrument.clone() };
                insts.entry(name).or_default().push(o);
            }
            for (s, v) in insts {
                rows.push(make_row(&region.name, &t.name, StatGroup::Instrument(s), &v, mo, metric));
            }
            if !t.issurface {
                for &(z1, z2) in zints {
                    let v: Vec<usize> = idx.iter().copied().filter(|&o| obs[o].depth >= z1 && obs[o].depth < z2).collect();
                    if !v.is_empty() {
                        rows.push(make_row(&region.name, &t.name, StatGroup::Depth(z1, z2), &v, mo, metric));
                    }
                }
            }
        }
    }
    rows
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Console table: one header per region, indented sub-rows.
pub fn format_stats_table(rows: &[StatRow], metric: Metric) -> String {
    let label = match metric {
        Metric::Mad => "MAD",
        Metric::Rmsd => "RMSD",
    };
    let mut s = String::new();
    let mut region = None;
    for r in rows {
        if region != Some(&r.region) {
            region = Some(&r.region);
            let _ = writeln!(s, "    region = {}:", r.region);
            let _ = writeln!(
                s,
                "    {:<20} {:>8} {:>9} {:>9} {:>9} {:>9} {:>10} {:>10}",
                "obs.type",
                "# obs.",
                format!("for.{label}"),
                format!("an.{label}"),
                "for.bias",
                "an.bias",
                "for.spread",
                "an.spread"
            );
        }
        let name = match &r.group {
            StatGroup::All => r.obstype.clone(),
            g => format!("  {}", g.label()),
        };
        let _ = writeln!(
            s,
            "    {:<20} {:>8} {:>9.3} {:>9} {:>9.3} {:>9} {:>10.3} {:>10}",
            name,
            r.n,
            r.inn_f,
            fmt_opt(r.inn_a),
            r.bias_f,
            fmt_opt(r.bias_a),
            r.spread_f,
            fmt_opt(r.spread_a)
        );
    }
    s
}

/// Machine-readable statistics.
pub fn write_stats_csv(path: &Path, rows: &[StatRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record([
        "region", "type", "group", "n", "inn_f", "inn_a", "bias_f", "bias_a", "spread_f", "spread_a",
    ])?;
    let o = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for r in rows {
        let group = match &r.group {
            StatGroup::All => "all".to_string(),
            StatGroup::Slot(s) => format!("slot:{s}"),
            StatGroup::Instrument(i) => format!("instrument:{i}"),
            StatGroup::Depth(a, b) => format!("depth:{a}-{b}"),
        };
        w.write_record([
            r.region.clone(),
            r.obstype.clone(),
            group,
            r.n.to_string(),
            r.inn_f.to_string(),
            o(r.inn_a),
            r.bias_f.to_string(),
            o(r.bias_a),
            r.spread_f.to_string(),
            o(r.spread_a),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One flagged batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BadBatch {
    pub obstype: String,
    pub batch: i64,
    pub bias: f64,
    pub mad: f64,
    pub n: usize,
}

/// Per-batch forecast innovation statistics `(type, batch) -> (bias, mad, n)`.
pub fn batch_stats(obs: &[Observation], inn_f: &[f64]) -> BTreeMap<(String, i64), (f64, f64, usize)> {
    let mut acc: BTreeMap<(String, i64), (f64, f64, usize)> = BTreeMap::new();
    for (o, d) in obs.iter().zip(inn_f) {
        let e = acc.entry((o.obstype.clone(), o.batch)).or_insert((0.0, 0.0, 0));
        e.0 += d;
        e.1 += d.abs();
        e.2 += 1;
    }
    for v in acc.values_mut() {
        v.0 /= v.2 as f64;
        v.1 /= v.2 as f64;
    }
    acc
}

/// Batches with more than `min_nobs` observations whose bias or MAD exceeds
/// the type's limits.
pub fn detect_bad_batches(obs: &[Observation], inn_f: &[f64], specs: &[BadBatchSpec]) -> Vec<BadBatch> {
    let mut out = Vec::new();
    for ((t, b), (bias, mad, n)) in batch_stats(obs, inn_f) {
        for s in specs.iter().filter(|s| s.obstype == t) {
            if n > s.min_nobs && (bias.abs() > s.max_bias || mad > s.max_mad) {
                out.push(BadBatch {
                    obstype: t.clone(),
                    batch: b,
                    bias,
                    mad,
                    n,
                });
                break;
            }
        }
    }
    out
}

/// `TYPE batch bias mad n` per line.
pub fn write_badbatch_report(path: &Path, rows: &[BadBatch]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(s, "{} {} {} {} {}", r.obstype, r.batch, r.bias, r.mad, r.n);
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_badbatch_report(path: &Path) -> Result<Vec<BadBatch>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected \"TYPE batch bias mad n\"", k + 1));
        if t.len() != 5 {
            return Err(bad());
        }
        out.push(BadBatch {
            obstype: t[0].to_string(),
            batch: t[1].parse().map_err(|_| bad())?,
            bias: t[2].parse().map_err(|_| bad())?,
            mad: t[3].parse().map_err(|_| bad())?,
            n: t[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Per-batch table printed by `--print-batch-stats`.
pub fn format_batch_stats(obs: &[Observation], inn_f: &[f64]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "    {:<10} {:>8} {:>10} {:>10} {:>8}", "type", "batch", "bias", "mad", "# obs.");
    for ((t, b), (bias, mad, n)) in batch_stats(obs, inn_f) {
        let _ = writeln!(s, "    {t:<10} {b:>8} {bias:>10.4} {mad:>10.4} {n:>8}");
    }
    s
}

/// `(mult, cap)` as echoed in point logs; cap is `None` for PLAIN.
pub fn inflation_attr(cfg: &DaConfig, var: &str) -> (f64, Option<f64>) {
    let inf = cfg.inflation_for(var);
    match inf.cap {
        crate::prm::InflationCap::Capped(c) => (inf.mult, Some(c)),
        crate::prm::InflationCap::Plain => (inf.mult, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ObsStatus;

    fn ob(t: &str, batch: i64, inst: &str, depth: f64) -> Observation {
        Observation {
            id: 0,
            obstype: t.into(),
            product: "P".into(),
            instrument: inst.into(),
            batch,
            lon: 0.0,
            lat: 0.0,
            depth,
            fi: 0.0,
            fj: 0.0,
            fk: 0.0,
            value: 0.0,
            std: 1.0,
            time: 0.0,
            status: ObsStatus::Good,
        }
    }

    fn moments(inn: Vec<f64>) -> ObsMoments {
        let n = inn.len();
        ObsMoments {
            inn_f: inn,
            inn_a: None,
            spread_f: vec![0.0; n],
            spread_a: None,
        }
    }

    #[test]
    fn stats_values() {
        let t = vec![ObsTypeSpec::new("SST", "sst", true)];
        let g = [Region::global()];
        let r = innovation_stats(&[ob("SST", 0, "a", 0.0)], &moments(vec![-0.5]), &t, &g, &[], 0.0, Metric::Mad);
        assert_eq!((r[0].n, r[0].bias_f, r[0].inn_f), (1, -0.5, 0.5));
        let two = [ob("SST", 0, "a", 0.0), ob("SST", 0, "-1", 0.0)];
        let r = innovation_stats(&two, &moments(vec![1.0, -1.0]), &t, &g, &[], 0.0, Metric::Mad);
        assert_eq!((r[0].bias_f, r[0].inn_f), (0.0, 1.0));
        assert_eq!(r[1].group, StatGroup::Instrument("N/A".into()));
        let r = innovation_stats(&two, &moments(vec![1.0, -3.0]), &t, &g, &[], 0.0, Metric::Rmsd);
        assert!((r[0].inn_f - 5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn depth_partition() {
        let t = vec![ObsTypeSpec::new("TEM", "t", false)];
        let obs: Vec<Observation> = [5.0, 60.0, 600.0, 40.0].iter().map(|&d| ob("TEM", 0, "a", d)).collect();
        let z = [(0.0, 50.0), (50.0, 500.0), (500.0, f64::INFINITY)];
        let r = innovation_stats(&obs, &moments(vec![1.0; 4]), &t, &[Region::global()], &z, 0.0, Metric::Mad);
        let depth_n: usize = r.iter().filter(|r| matches!(r.group, StatGroup::Depth(..))).map(|r| r.n).sum();
        assert_eq!(depth_n, r[0].n);
    }

    #[test]
    fn bad_batch_rules() {
        let spec = [BadBatchSpec {
            obstype: "SLA".into(),
            max_bias: 0.06,
            max_mad: 0.10,
            min_nobs: 500,
        }];
        let mk = |n: usize, b: i64| (0..n).map(|_| ob("SLA", b, "a", 0.0)).collect::<Vec<_>>();
        let obs = mk(600, 12);
        assert_eq!(detect_bad_batches(&obs, &vec![0.07; 600], &spec).len(), 1);
        let obs4 = mk(400, 12);
        assert!(detect_bad_batches(&obs4, &vec![0.07; 400], &spec).is_empty());
        let inn: Vec<f64> = (0..600).map(|k| if k % 2 == 0 { 0.17 } else { -0.07 }).collect();
        let r = detect_bad_batches(&obs, &inn, &spec);
        assert_eq!(r.len(), 1);
        assert!((r[0].bias - 0.05).abs() < 1e-12 && (r[0].mad - 0.12).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("badbatches.out");
        write_badbatch_report(&p, &r).unwrap();
        assert_eq!(read_badbatch_report(&p).unwrap(), r);
    }

    #[test]
    fn analysed_rows() {
        let he = [1.0, 2.0, 4.0];
        assert_eq!(analysed_row_enkf(&he, &DMatrix::identity(3, 3)), he.to_vec());
        let ha = [-1.0, 0.0, 1.0];
        assert_eq!(analysed_row_enoi(5.0, &ha, &DVector::zeros(3)), vec![4.0, 5.0, 6.0]);
    }
}
