mod common;

use common::FnModel;
use cryoloop::evaluate::{
    batch_metrics, coverage, cross_reference, evaluate_stage, hit_rate, kendall_tau_b, pair_counts, spearman,
    IssuedSignatures,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn brute_tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    let (mut s, mut n0, mut ta, mut tb) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            n0 += 1;
            let da = (a[i] - a[j]).signum() * if a[i] == a[j] { 0.0 } else { 1.0 };
            let db = (b[i] - b[j]).signum() * if b[i] == b[j] { 0.0 } else { 1.0 };
            if da == 0.0 {
                ta += 1;
            }
            if db == 0.0 {
                tb += 1;
            }
            s += (da * db) as i64;
        }
    }
    let den = ((n0 - ta) as f64 * (n0 - tb) as f64).sqrt();
    (den > 0.0).then(|| s as f64 / den)
}

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (brute_ranks(a), brute_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

fn tied_values() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..6).prop_map(f64::from), n),
            prop::collection::vec((0i32..6).prop_map(f64::from), n),
        )
    })
}

#[test]
fn kendall_known_values() {
    assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), Some(1.0));
    assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(kendall_tau_b(&[1.0, 1.0], &[1.0, 2.0]), None);
    let c = pair_counts(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 2.0]);
    assert_eq!((c.pairs, c.ties_a, c.ties_b, c.score), (6, 1, 1, 2));
}

#[test]
fn hit_rate_and_coverage_boundaries() {
    assert_eq!(hit_rate(&[50.0, 49.9], &[50.0, 50.0], 50.0), 0.5);
    assert_eq!(coverage(&[11.0, 12.0], &[10.0, 10.0], &[1.0, 1.0], 1.0), 0.5);
}

#[test]
fn stage_evaluation_ignores_later_rows() {
    let model = FnModel(|x: &[f64]| (x[0] * 10.0, 2.0));
    let x = DMatrix::from_fn(9, 1, |i, _| i as f64);
    let mut y: Vec<f64> = (0..9).map(|i| i as f64 * 10.0 + (i % 3) as f64 - 1.0).collect();
    let stages = [0, 0, 0, 1, 1, 1, 2, 2, 2];
    let a = evaluate_stage(1, &model, &x, &y, &stages).unwrap();
    for v in &mut y[6..] {
        *v = 1e6;
    }
    let b = evaluate_stage(1, &model, &x, &y, &stages).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.batch.n, 3);
    assert_eq!(a.cumulative_rows, 6);
}

#[test]
fn attribution_prefers_earliest_stage_then_first_file() {
    let issued = vec![
        IssuedSignatures {
            stage: 1,
            file: "stage_1/slate.csv".into(),
            signatures: vec!["a".into(), "b".into()],
        },
        IssuedSignatures {
            stage: 0,
            file: "stage_0/candidates_general_bo.csv".into(),
            signatures: vec!["b".into()],
        },
        IssuedSignatures {
            stage: 0,
            file: "stage_0/slate.csv".into(),
            signatures: vec!["b".into(), "c".into()],
        },
    ];
    let wet = vec![
        ("r1".to_string(), "a".to_string()),
        ("r2".to_string(), "b".to_string()),
        ("r3".to_string(), "z".to_string()),
    ];
    let out = cross_reference(&issued, &wet);
    assert_eq!(out[0].stage, Some(1));
    assert_eq!(out[1].stage, Some(0));
    assert_eq!(out[1].matched_file.as_deref(), Some("stage_0/candidates_general_bo.csv"));
    assert!(!out[2].is_matched());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kendall_matches_brute_force((a, b) in tied_values()) {
        let fast = kendall_tau_b(&a, &b);
        let slow = brute_tau_b(&a, &b);
        match (fast, slow) {
            (Some(f), Some(s)) => prop_assert!((f - s).abs() < 1e-12, "{f} vs {s}"),
            (f, s) => prop_assert_eq!(f, s),
        }
    }

    #[test]
    fn spearman_matches_brute_force((a, b) in tied_values()) {
        match (spearman(&a, &b), brute_spearman(&a, &b)) {
            (Some(f), Some(s)) => prop_assert!((f - s).abs() < 1e-12),
            (f, s) => prop_assert_eq!(f, s),
        }
    }

    #[test]
    fn rank_metrics_invariant_under_monotone_maps(
        a in prop::collection::vec(-5.0f64..5.0, 3..30),
        seed in prop::collection::vec(-5.0f64..5.0, 30),
    ) {
        let b: Vec<f64> = a.iter().zip(&seed).map(|(x, s)| x + s).collect();
        let fa: Vec<f64> = a.iter().map(|v| v.exp() * 2.0).collect();
        let fb: Vec<f64> = b.iter().map(|v| 2.0 * v + 1.0).collect();
        let (k1, k2) = (kendall_tau_b(&a, &b), kendall_tau_b(&fa, &fb));
        let (s1, s2) = (spearman(&a, &b), spearman(&fa, &fb));
        prop_assert_eq!(k1, k2);
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn metric_orderings(
        rows in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..20.0), 1..50),
    ) {
        let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let b = batch_metrics(&y, &m, &s).unwrap();
        prop_assert!(b.rmse >= b.mae - 1e-12);
        prop_assert!(b.coverage_2s >= b.coverage_1s);
        prop_assert!(b.mean_signed_residual.abs() <= b.mae + 1e-12);
        for h in [b.hit_rate_50, b.hit_rate_70, b.coverage_1s] {
            prop_assert!((0.0..=1.0).contains(&h));
        }
    }
}
