use std::sync::Arc;

mod common;

use common::oracles::{brute_pearson, brute_rmse, brute_spline, random_knots};
use drowsy_core::eval::{
    build_report, pearson_correlation, read_records, rmse, spline_interpolate, Mode,
};
use drowsy_core::preproc::{PreparedSession, SegmentState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-9;

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..200 {
        let n = rng.gen_range(2..60);
        let m: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..8.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..8.0)).collect();
        assert!((rmse(&m, &p).unwrap() - brute_rmse(&m, &p)).abs() < ORACLE_TOL, "trial {trial}");
        let r = pearson_correlation(&m, &p).unwrap();
        assert!((r - brute_pearson(&m, &p)).abs() < ORACLE_TOL, "trial {trial}");
        assert!((-1.0..=1.0).contains(&r));

        let k = rng.gen_range(2..14);
        let knots = random_knots(&mut rng, k);
        let lo = knots[0].0 - 1.0;
        let hi = knots[knots.len() - 1].0 + 1.0;
        let queries: Vec<f64> = (0..50).map(|_| rng.gen_range(lo..hi)).collect();
        let got = spline_interpolate(&knots, &queries).unwrap();
        let want = brute_spline(&knots, &queries);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < ORACLE_TOL, "trial {trial}: {g} vs {w}");
        }
    }
}

#[test]
fn spline_reproduces_every_knot() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let knots = random_knots(&mut rng, 20);
    let xs: Vec<f64> = knots.iter().map(|k| k.0).collect();
    let ys = spline_interpolate(&knots, &xs).unwrap();
    for (y, k) in ys.iter().zip(&knots) {
        assert_eq!(*y, k.1);
    }
}

proptest! {
    #[test]
    fn correlation_is_affine_invariant(
        x in prop::collection::vec(-10.0f64..10.0, 3..40),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((pearson_correlation(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_is_symmetric_and_zero_only_on_equality(
        m in prop::collection::vec(0.5f64..8.0, 1..30),
        shift in prop::collection::vec(-1.0f64..1.0, 30),
    ) {
        let p: Vec<f64> = m.iter().zip(&shift).map(|(a, s)| a + s).collect();
        prop_assert_eq!(rmse(&m, &p).unwrap(), rmse(&p, &m).unwrap());
        prop_assert_eq!(rmse(&m, &m).unwrap(), 0.0);
        if m != p {
            prop_assert!(rmse(&m, &p).unwrap() > 0.0);
        }
    }
}

fn session(measured: &[Option<f64>]) -> PreparedSession {
    PreparedSession {
        subject_id: "eval".into(),
        segments: measured
            .iter()
            .enumerate()
            .map(|(i, m)| {
                Arc::new(SegmentState {
                    index: i,
                    t_start_s: 3.0 * i as f64,
                    channels: 1,
                    samples_per_plane: 1,
                    planes: vec![0.0; 3],
                    measured_rt: *m,
                })
            })
            .collect(),
        trials: Vec::new(),
        labels: Vec::new(),
        latent_rt: None,
    }
}

#[test]
fn report_on_spline_predictions_is_perfect() {
    let measured = [Some(1.0), None, Some(2.5), None, None, Some(1.5), Some(3.0)];
    let s = session(&measured);
    let knots: Vec<(f64, f64)> = measured
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|v| (i as f64, v)))
        .collect();
    let idx: Vec<f64> = (0..measured.len()).map(|i| i as f64).collect();
    let curve = spline_interpolate(&knots, &idx).unwrap();
    let report = build_report(Mode::Rl, &s, &curve).unwrap();
    assert!((report.correlation.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(report.rmse, Some(0.0));
    assert_eq!(report.covered, 4);
    assert_eq!(report.records.len(), measured.len());
    assert!(report.warnings.is_empty());
}

#[test]
fn degenerate_reports_carry_warnings() {
    let s = session(&[Some(1.0), None, Some(2.0)]);
    let report = build_report(Mode::Sl, &s, &[2.0, 2.0, 2.0]).unwrap();
    assert_eq!(report.correlation, None);
    assert!(report.rmse.is_some());
    assert!(report.warnings.iter().any(|w| w.contains("correlation")));

    let bare = session(&[None, None, None]);
    let report = build_report(Mode::Rl, &bare, &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(report.rmse, None);
    assert_eq!(report.correlation, None);
    assert!(report.warnings.len() >= 2);
    assert!(build_report(Mode::Rl, &bare, &[1.0]).is_err());
}

#[test]
fn report_files_recompute_to_the_same_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let measured: Vec<Option<f64>> = (0..60)
        .map(|_| rng.gen_bool(0.4).then(|| rng.gen_range(0.5..8.0)))
        .collect();
    let s = session(&measured);
    let predictions: Vec<f64> = (0..60).map(|_| rng.gen_range(0.5..8.0)).collect();
    let report = build_report(Mode::Rl, &s, &predictions).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    report.write(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(json.get("rmse").is_some() && json.get("correlation").is_some());

    let rows = read_records(&path.with_extension("csv")).unwrap();
    assert_eq!(rows.len(), 60);
    let (m, p): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.measured_rt_s.map(|m| (m, r.predicted_rt_s)))
        .unzip();
    let spline: Vec<f64> = rows.iter().map(|r| r.spline_rt_s.unwrap()).collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.predicted_rt_s).collect();
    assert!((brute_rmse(&m, &p) - json["rmse"].as_f64().unwrap()).abs() < ORACLE_TOL);
    assert!((brute_pearson(&pred, &spline) - json["correlation"].as_f64().unwrap()).abs() < ORACLE_TOL);
}
