use enkf_core::analysis::{compute_transform, StdObs};
use enkf_core::ensemble::{covariance, mean_preserving_rotation, Ensemble};
use enkf_core::geo::{great_circle_km, Grid};
use enkf_core::io::{self, ObsStatus, Observation};
use enkf_core::locality::{gc_f0, NodeData, Stride, TransformField};
use enkf_core::models::{propagate_ensemble, ModelSpec};
use enkf_core::obsprep::{apply_error_std, superob};
use enkf_core::oracle::{kalman_gain, kf_analysis, DenseKfState};
use enkf_core::prm::{parse_main, ErrorStdOp, Mode, Scheme};
use enkf_core::twin::{self, run_twin, Scenario, TwinConfig};
use enkf_core::update::{update_field, MemberFields};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rand_mat(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
}

fn std_obs(seed: u64, p: usize, m: usize, scale: f64) -> StdObs {
    let a = Ensemble::new(rand_mat(seed, p, m)).unwrap().anomalies() * scale;
    StdObs {
        s: rand_mat(seed + 1, p, 1).column(0).into_owned(),
        s_mat: a / ((m - 1) as f64).sqrt(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn array_round_trip_is_bitwise(data in prop::collection::vec(any::<f32>(), 1..64)) {
        let bytes = io::encode_array(&[data.len()], &data).unwrap();
        let back = io::decode_array(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.dims, vec![data.len()]);
        prop_assert!(back.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn geo_round_trip_and_metric(fi in 0.0..38.0f64, fj in 0.0..18.0f64,
                                 a in (0.0..360.0f64, -80.0..80.0f64), b in (0.0..360.0f64, -80.0..80.0f64), c in (0.0..360.0f64, -80.0..80.0f64)) {
        let g = Grid::surface("g", (0..40).map(|i| i as f64 * 9.0).collect(), (0..19).map(|j| -81.0 + j as f64 * 9.0).collect()).unwrap();
        let (lon, lat) = g.fij_to_xy(fi, fj);
        let (fi2, fj2) = g.xy_to_fij(lon, lat).unwrap();
        prop_assert!((fi - fi2).abs() < 1e-9 && (fj - fj2).abs() < 1e-9);
        let d = |p: (f64, f64), q: (f64, f64)| great_circle_km(p.0, p.1, q.0, q.1);
        prop_assert!((d(a, b) - d(b, a)).abs() < 1e-9);
        prop_assert!(d(a, c) <= d(a, b) + d(b, c) + 1e-9);
    }

    #[test]
    fn error_std_matches_scalar_oracle(start in prop::option::of(0.01..2.0f64),
                                       steps in prop::collection::vec((0usize..5, 0.01..2.0f64), 1..6)) {
        let ops = [ErrorStdOp::Equal, ErrorStdOp::Plus, ErrorStdOp::Mult, ErrorStdOp::Min, ErrorStdOp::Max];
        let seq: Vec<(ErrorStdOp, f64)> = steps.iter().map(|&(k, v)| (ops[k], v)).collect();
        let mut t = start.unwrap_or(0.0);
        for &(op, v) in &seq {
            t = match op {
                ErrorStdOp::Equal => v,
                ErrorStdOp::Plus => (t * t + v * v).sqrt(),
                ErrorStdOp::Mult => t * v,
                ErrorStdOp::Min => t.max(v),
                ErrorStdOp::Max => t.min(v),
            };
        }
        match apply_error_std(start, &seq) {
            Ok(got) => prop_assert_eq!(got, t),
            Err(_) => prop_assert!(t.is_nan() || t <= 0.0),
        }
    }

    #[test]
    fn etkf_transform_properties(seed in 0u64..10_000, p in 1usize..10, m in 2usize..10, scale in 0.1..3.0f64) {
        let so = std_obs(seed, p, m, scale);
        let lt = compute_transform(&so, Scheme::Etkf, 1.0).unwrap();
        let ones = DVector::from_element(m, 1.0);
        prop_assert!((&lt.t_r * &ones - &ones).amax() < 1e-10);
        prop_assert!((&lt.t_r - lt.t_r.transpose()).amax() < 1e-10);
        prop_assert!(lt.dfs <= m as f64 + 1e-12 && lt.dfs >= 0.0);
        prop_assert!((lt.x5.row_sum() - ones.transpose()).amax() < 1e-10);
        let one = StdObs { s: so.s.rows(0, 1).into_owned(), s_mat: so.s_mat.rows(0, 1).into_owned() };
        prop_assert!(compute_transform(&one, Scheme::Denkf, 1.0).unwrap().dfs < 1.0);
    }

    #[test]
    fn mean_update_is_invariant_under_redraw(seed in 0u64..10_000, m in 3usize..9) {
        let n = 7;
        let e = Ensemble::new(rand_mat(seed, n, m)).unwrap();
        let up = mean_preserving_rotation(m, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let e2 = e.redraw(&up).unwrap();
        prop_assert!((e2.mean() - e.mean()).amax() < 1e-12);
        prop_assert!((e2.covariance().unwrap() - e.covariance().unwrap()).norm() <= 1e-10 * e.covariance().unwrap().norm().max(1.0));
        let h = rand_mat(seed + 7, 3, n);
        let d = rand_mat(seed + 8, 3, 1).column(0).into_owned();
        let mean_after = |e: &Ensemble| {
            let ha = &h * e.anomalies();
            let so = StdObs { s: d.clone() / 0.5, s_mat: ha / 0.5 / ((m - 1) as f64).sqrt() };
            let lt = compute_transform(&so, Scheme::Etkf, 1.0).unwrap();
            e.apply_x5(&lt.x5).unwrap().mean()
        };
        prop_assert!((mean_after(&e) - mean_after(&e2)).amax() < 1e-9);
    }

    #[test]
    fn interpolated_x5_columns_sum_to_one(seed in 0u64..10_000, fi in 0.0..29.0f64) {
        let g = twin::ring_grid(30).unwrap();
        let m = 5;
        let mut tf = TransformField::identity(&g, 4, m, true, 1);
        if let NodeData::X5(v) = &mut tf.data {
            for (k, x) in v.iter_mut().enumerate() {
                let so = std_obs(seed + k as u64, 3, m, 1.0);
                *x = compute_transform(&so, Scheme::Etkf, 1.0).unwrap().x5;
            }
        }
        let enkf_core::locality::Transform::X5(x) = tf.interp(fi, 0.0) else { unreachable!() };
        prop_assert!((x.row_sum() - DMatrix::from_element(1, m, 1.0)).amax() < 1e-9);
    }

    #[test]
    fn update_is_linear_and_spares_land(seed in 0u64..10_000, alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
        let (ni, nj, m) = (6, 4, 4);
        let mut numlevels = vec![1usize; ni * nj];
        numlevels[5] = 0;
        numlevels[13] = 0;
        let depth: Vec<f64> = numlevels.iter().map(|&l| if l == 0 { 0.0 } else { 100.0 }).collect();
        let g = Grid::new("g", (0..ni).map(|i| i as f64).collect(), (0..nj).map(|j| j as f64).collect(), vec![0.0], depth, numlevels).unwrap();
        let mut tf = TransformField::identity(&g, 2, m, true, 1);
        if let NodeData::X5(v) = &mut tf.data {
            for (k, x) in v.iter_mut().enumerate() {
                *x = compute_transform(&std_obs(seed + k as u64, 2, m, 1.0), Scheme::Denkf, 1.0).unwrap().x5;
            }
        }
        let field = |s: u64| MemberFields { dims: vec![nj, ni], members: (0..m).map(|j| rand_mat(s + j as u64, ni * nj, 1).as_slice().to_vec()).collect() };
        let (f1, f2) = (field(seed), field(seed + 100));
        let combo = MemberFields { dims: f1.dims.clone(), members: f1.members.iter().zip(&f2.members).map(|(a, b)| a.iter().zip(b).map(|(a, b)| alpha * a + beta * b).collect()).collect() };
        let upd = |f: &MemberFields| { let mut f = f.clone(); update_field(&mut f, &g, &tf, None).unwrap(); f };
        let (u1, u2, uc) = (upd(&f1), upd(&f2), upd(&combo));
        for j in 0..m {
            for c in 0..ni * nj {
                prop_assert!((uc.members[j][c] - alpha * u1.members[j][c] - beta * u2.members[j][c]).abs() < 1e-10);
            }
            for c in [5, 13] {
                prop_assert_eq!(uc.members[j][c].to_bits(), combo.members[j][c].to_bits());
            }
        }
    }

    #[test]
    fn superobs_lie_in_member_hull(seed in 0u64..10_000, sob in 1usize..4) {
        let g = Grid::surface("b", (0..12).map(|i| i as f64).collect(), (0..8).map(|j| j as f64).collect()).unwrap();
        let cfg = twin::ring_config(Mode::Enkf, "", std::path::Path::new(".")).unwrap();
        let u = rand_mat(seed, 60, 4);
        let obs: Vec<Observation> = (0..60).map(|k| {
            let fi = (u[(k, 0)].abs() * 3.0) % 11.0;
            let fj = (u[(k, 1)].abs() * 3.0) % 7.0;
            let (lon, lat) = g.fij_to_xy(fi, fj);
            Observation { id: k, obstype: "X".into(), product: "p".into(), instrument: "i".into(), batch: 0, lon, lat, depth: 0.0,
                fi, fj, fk: 0.0, value: u[(k, 2)], std: 0.1 + u[(k, 3)].abs(), time: 0.0, status: ObsStatus::Good }
        }).collect();
        let so = superob(&obs, &cfg, &g, sob, false).unwrap();
        for (s, mem) in so.obs.iter().zip(&so.members) {
            let (lo, hi) = mem.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| (lo.min(obs[k].fi), hi.max(obs[k].fi)));
            prop_assert!(s.fi >= lo - 1e-12 && s.fi <= hi + 1e-12);
            let (lo, hi) = mem.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| (lo.min(obs[k].fj), hi.max(obs[k].fj)));
            prop_assert!(s.fj >= lo - 1e-12 && s.fj <= hi + 1e-12);
        }
    }

    #[test]
    fn posterior_covariance_is_psd(seed in 0u64..10_000, n in 2usize..8, p in 1usize..6) {
        let l = rand_mat(seed, n, n);
        let pf = &l * l.transpose();
        let h = rand_mat(seed + 1, p, n);
        let r = DMatrix::from_diagonal(&DVector::from_element(p, 0.3));
        let st = kf_analysis(&DenseKfState { x: DVector::zeros(n), p: pf.clone() }, &h, &r, &DVector::zeros(p)).unwrap();
        let min_eig = st.p.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-10 * pf.norm());
        prop_assert!(kalman_gain(&pf, &h, &r).is_ok());
    }
}

#[test]
fn main_prm_round_trip_is_idempotent() {
    let text = "MODE = ENOI\nSCHEME = ETKF\nALPHA = 0.5\nMODEL = model.prm\nGRID = grid.prm\nOBSTYPES = obstypes.prm\nOBS = obs.prm\n\
DATE = 6565.5 days since 1990-01-01\nENSDIR = ens\nBGDIR = bg\nKFACTOR = 2\nRFACTOR = 1.5\nLOCRAD 150 500\nWEIGHT 3 1\nSTRIDE = 3\n\
SOBSTRIDE = 0\nINFLATION = 1.05 PLAIN\nZSTATINTS = [0 50] [50 500]\nREGION = Tas 140 150 -45 -40 [0 100]\nPOINTLOG 57 51\n\
BADBATCHES = SLA 0.06 0.10 500\n";
    let a = parse_main(text).unwrap();
    let b = parse_main(&a.to_prm_string()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mode, Mode::Enoi);
    let w: f64 = a.locrad.as_ref().unwrap().weights.iter().sum();
    assert!((w - 1.0).abs() < 1e-12);
}

#[test]
fn observation_table_round_trip() {
    let obs = vec![Observation {
        id: 3,
        obstype: "SLA".into(),
        product: "RADS, \"IB\"".into(),
        instrument: "-1".into(),
        batch: -1,
        lon: 147.123456789,
        lat: -42.5,
        depth: 0.0,
        fi: 12.25,
        fj: 7.75,
        fk: 0.0,
        value: 0.123456789,
        std: 0.07,
        time: 6565.25,
        status: ObsStatus::Outside,
    }];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("o.csv");
    io::write_obs(&p, &obs).unwrap();
    assert_eq!(io::read_obs(&p).unwrap(), obs);
    io::write_obs(&p, &[]).unwrap();
    assert!(io::read_obs(&p).unwrap().is_empty());
}

#[test]
fn linadv_anomaly_propagation_matches_dense() {
    let spec = ModelSpec::linadv(8);
    let e = rand_mat(3, 8, 12);
    let m = spec.matrix().unwrap();
    let p = covariance(&Ensemble::new(e.clone()).unwrap().anomalies());
    let e2 = propagate_ensemble(&spec, &e, 1, 0).unwrap();
    let p2 = covariance(&Ensemble::new(e2).unwrap().anomalies());
    assert!((&p2 - &m * &p * m.transpose()).amax() < 1e-12);
}

#[test]
fn taper_is_monotone() {
    let v: Vec<f64> = (0..=1000).map(|k| gc_f0(2.2 * k as f64 / 1000.0)).collect();
    assert!(v.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    let s = Stride { n: 100, stride: 5 };
    assert_eq!(s.nodes(), 21);
}

#[test]
fn analysis_reduces_misfit_on_the_linear_scenario() {
    let r = run_twin(&TwinConfig::new(Scenario::LinAdvOracle)).unwrap();
    let f = r.time_mean(1, 20, |c| c.rmse_f);
    let a = r.time_mean(1, 20, |c| c.rmse_a);
    assert!(a < f, "analysis {a} vs forecast {f}");
}
