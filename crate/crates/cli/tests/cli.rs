use std::path::Path;
use std::process::{Command, Output};

use enkf_core::io::{self, ObsStatus};
use enkf_core::prm::Mode;
use enkf_core::twin::{self, ring_spacing_km};
use nalgebra::{DMatrix, DVector};

const N: usize = 30;
const M: usize = 8;

fn enkf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enkf")).current_dir(dir).args(args).output().expect("spawn enkf")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = enkf(dir, args);
    assert!(
        out.status.success(),
        "enkf {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Smooth deterministic ensemble on the ring.
fn ensemble() -> DMatrix<f64> {
    DMatrix::from_fn(N, M, |i, j| {
        let t = i as f64 * std::f64::consts::TAU / N as f64;
        (t + j as f64 * 0.7).sin() + 0.3 * (2.0 * t + j as f64 * 1.3).cos()
    })
}

fn obs_csv(extra: &str) -> String {
    let grid = twin::ring_grid(N).unwrap();
    let mut s = String::from("lon,lat,value,std,batch\n");
    for k in 0..12 {
        let fi = 0.4 + 2.3 * k as f64;
        let (lon, lat) = grid.fij_to_xy(fi, 0.0);
        s.push_str(&format!("{lon},{lat},{},{},{}\n", (fi * 0.2).sin(), 0.3 + 0.01 * k as f64, k % 3));
    }
    s.push_str(extra);
    s
}

fn locrad() -> String {
    format!("LOCRAD = {}\n", 6.0 * ring_spacing_km(N))
}

fn enkf_case(dir: &Path, extra: &str) {
    twin::write_ring_case(dir, Mode::Enkf, &format!("SCHEME = ETKF\n{}{extra}", locrad()), &ensemble(), None, &obs_csv("")).unwrap();
}

fn field(path: &Path) -> Vec<f64> {
    io::read_array(path).unwrap().to_f64()
}

#[test]
fn version_and_describe() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ok(dir.path(), &["--version"]).contains(env!("CARGO_PKG_VERSION")));
    let out = ok(dir.path(), &["prep", "--describe-prm-format"]);
    assert!(out.contains("MODE") && out.contains("LOCRAD"));
    assert!(ok(dir.path(), &["calc", "--describe-prm-format", "obstypes"]).contains("HFUNCTION"));
    assert!(!enkf(dir.path(), &["prep", "--describe-prm-format", "nonsense"]).status.success());
}

#[test]
fn enkf_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    enkf_case(d, "");
    ok(d, &["prep", "main.prm"]);
    let sup = io::read_obs(&d.join("observations.csv")).unwrap();
    assert!(!sup.is_empty() && sup.len() <= 12);
    let log = ok(d, &["calc", "main.prm"]);
    assert!(log.contains("ensemble size = 8"), "{log}");
    assert!(d.join("X5.ekc").exists() && d.join("obsstats.csv").exists() && d.join("enkf_diag.ekc").exists());
    let x5 = std::fs::read(d.join("X5.ekc")).unwrap();
    ok(d, &["--threads", "3", "calc", "main.prm"]);
    assert_eq!(x5, std::fs::read(d.join("X5.ekc")).unwrap(), "calc is not bit-reproducible");
    ok(d, &["update", "main.prm", "--calculate-spread", "--direct-write", "--leave-tiles"]);
    let f = field(&d.join("ens/mem001_x.ekc"));
    let a = field(&d.join("ens/mem001_x.ekc.analysis"));
    assert_eq!(f.len(), a.len());
    assert!(f.iter().zip(&a).any(|(f, a)| f != a));
    assert!(d.join("spread_x.ekc").exists() && d.join("spread_x_an.ekc").exists());
}

#[test]
fn prep_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    twin::write_ring_case(d, Mode::Enkf, "SOBSTRIDE = 4\n", &ensemble(), None, &obs_csv("10,60,1.0,0.3,0\n5,0,1.0,-1,0\n")).unwrap();
    ok(d, &["prep", "main.prm"]);
    let orig = io::read_obs(&d.join("observations-orig.csv")).unwrap();
    assert!(orig.iter().all(|o| o.status != ObsStatus::Outside));
    assert!(orig.iter().any(|o| o.status == ObsStatus::Bad));
    let sup = io::read_obs(&d.join("observations.csv")).unwrap();
    assert!(sup.len() < 12);
    let described = ok(d, &["prep", "main.prm", "--describe-superob", "0"]);
    assert!(described.contains("superobservation 0"), "{described}");

    ok(d, &["prep", "main.prm", "--log-all-obs", "--no-superobing"]);
    let orig = io::read_obs(&d.join("observations-orig.csv")).unwrap();
    assert!(orig.iter().any(|o| o.status == ObsStatus::Outside));
    let good: Vec<_> = orig.into_iter().filter(|o| o.status == ObsStatus::Good).collect();
    assert_eq!(io::read_obs(&d.join("observations.csv")).unwrap(), good);
}

#[test]
fn calc_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    enkf_case(d, "");
    ok(d, &["prep", "main.prm"]);
    let log = ok(d, &["calc", "main.prm", "--forecast-stats-only"]);
    assert!(!d.join("X5.ekc").exists());
    assert!(d.join("obsstats.csv").exists());
    assert!(log.contains("obs.type"), "{log}");
    assert_eq!(ok(d, &["stats", "main.prm", "--use-rmsd-for-obsstats"]).lines().count(), log.lines().count());

    ok(d, &["calc", "main.prm", "--single-observation-ijk", "10", "0", "0", "X", "1", "0.5"]);
    assert!(d.join("X5.ekc").exists());

    ok(d, &["calc", "main.prm", "--no-mean-update"]);
    ok(d, &["update", "main.prm"]);
    let mean = |suffix: &str| -> Vec<f64> {
        let mut s = vec![0.0; N];
        for k in 1..=M {
            for (a, v) in s.iter_mut().zip(field(&d.join(format!("ens/mem{k:03}_x.ekc{suffix}")))) {
                *a += v / M as f64;
            }
        }
        s
    };
    for (f, a) in mean("").iter().zip(mean(".analysis")) {
        assert!((f - a).abs() < 1e-5, "mean moved: {f} -> {a}");
    }
}

#[test]
fn calc_without_observations_fails_unless_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    twin::write_ring_case(d, Mode::Enkf, "", &ensemble(), None, "lon,lat,value,std\n").unwrap();
    ok(d, &["prep", "main.prm"]);
    let out = enkf(d, &["calc", "main.prm"]);
    assert!(!out.status.success());
    ok(d, &["calc", "main.prm", "--ignore-no-obs"]);
}

#[test]
fn enoi_single_obs_increment_is_a_local_bump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Phase-shifted waves give a stationary sample covariance.
    let mut cols = Vec::new();
    for k in 1..=3 {
        for q in 0..4 {
            let phi = q as f64 * std::f64::consts::FRAC_PI_2;
            cols.push(DVector::from_fn(N, |i, _| (k as f64 * i as f64 * std::f64::consts::TAU / N as f64 + phi).cos()));
        }
    }
    let e = DMatrix::from_columns(&cols);
    let bg = DVector::from_fn(N, |i, _| 0.1 * i as f64);
    twin::write_ring_case(d, Mode::Enoi, &locrad(), &e, Some(&bg), "lon,lat,value,std\n").unwrap();
    ok(d, &["calc", "main.prm", "--single-observation-ijk", "10", "0", "0", "X", "1", "0.5"]);
    assert!(d.join("w.ekc").exists());
    ok(d, &["update", "main.prm", "--output-increment"]);
    let inc = field(&d.join("bg/bg_x.ekc.increment"));
    let imax = (0..N).max_by(|&a, &b| inc[a].total_cmp(&inc[b])).unwrap();
    assert_eq!(imax, 10, "{inc:?}");
    assert!(inc[10] > 0.0 && inc[10] < 1.0);
    assert!(inc[25].abs() < 1e-6, "beyond the support: {}", inc[25]);
}

#[test]
fn enoi_stats_need_no_ensemble() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bg = DVector::from_fn(N, |i, _| (i as f64 * 0.2).sin());
    twin::write_ring_case(d, Mode::Enoi, "", &ensemble(), Some(&bg), &obs_csv("")).unwrap();
    let main = std::fs::read_to_string(d.join("main.prm")).unwrap().replace("ENSDIR = ens\n", "");
    std::fs::write(d.join("main.prm"), main).unwrap();
    std::fs::remove_dir_all(d.join("ens")).unwrap();
    ok(d, &["prep", "main.prm"]);
    let log = ok(d, &["stats", "main.prm"]);
    assert!(log.contains("obs.type"), "{log}");
}

#[test]
fn twin_is_reproducible_and_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["twin", "lorenz96", "--cycles", "15", "-o", "a.csv"]);
    ok(d, &["--threads", "2", "twin", "lorenz96", "--cycles", "15", "-o", "b.csv"]);
    let a = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(d.join("b.csv")).unwrap());
    assert_eq!(a.lines().count(), 16);
    assert!(a.starts_with("cycle,rmse_f,rmse_a,spread_f,spread_a,dfs_mean,srf_mean"));
    let lin = ok(d, &["twin", "linadv-oracle", "--cycles", "3"]);
    let last = lin.lines().last().unwrap();
    assert!(!last.ends_with(','), "{last}");
    assert!(!enkf(d, &["twin", "nonsense"]).status.success());
}
