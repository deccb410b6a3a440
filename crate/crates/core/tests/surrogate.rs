mod common;

use common::dense_solve;
use cryoloop::surrogate::{fit_gp, kernel_eval, FitOptions, GpModel, KernelParams};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent reference: standardize, build the covariance, solve densely.
struct Reference {
    mean: Vec<f64>,
    var: Vec<f64>,
    lml: f64,
}

fn reference(x: &DMatrix<f64>, y: &[f64], alpha: &[f64], p: &KernelParams, jitter: f64, q: &DMatrix<f64>) -> Reference {
    let (n, d) = x.shape();
    let mut mu = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
        mu[j] = col.iter().sum::<f64>() / n as f64;
        let v = col.iter().map(|c| (c - mu[j]).powi(2)).sum::<f64>() / n as f64;
        sd[j] = if v.sqrt() > 0.0 { v.sqrt() } else { 1.0 };
    }
    let z = |row: Vec<f64>| -> Vec<f64> { row.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = (0..n).map(|i| z((0..d).map(|j| x[(i, j)]).collect())).collect();
    let qs: Vec<Vec<f64>> = (0..q.nrows()).map(|i| z((0..d).map(|j| q[(i, j)]).collect())).collect();

    let ym = y.iter().sum::<f64>() / n as f64;
    let yv = y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n as f64;
    let ys = if n < 2 || yv.sqrt() <= 0.0 { 1.0 } else { yv.sqrt() };
    let yn: Vec<f64> = y.iter().map(|v| (v - ym) / ys).collect();

    let k = |a: &[f64], b: &[f64]| {
        let r = 5f64.sqrt() * a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt() / p.length_scale;
        p.amplitude * (1.0 + r + r * r / 3.0) * (-r).exp()
    };
    let kmat: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| k(&xs[i], &xs[j]) + if i == j { p.white_noise + alpha[i] + jitter } else { 0.0 })
                .collect()
        })
        .collect();
    // right-hand sides: targets, then every query's cross-covariance
    let mut rhs = vec![vec![0.0; 1 + qs.len()]; n];
    for i in 0..n {
        rhs[i][0] = yn[i];
        for (t, qq) in qs.iter().enumerate() {
            rhs[i][1 + t] = k(&xs[i], qq);
        }
    }
    let (sol, log_det) = dense_solve(kmat, rhs.clone());
    let quad: f64 = (0..n).map(|i| yn[i] * sol[i][0]).sum();
    let lml = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut mean = Vec::new();
    let mut var = Vec::new();
    for t in 0..qs.len() {
        let m: f64 = (0..n).map(|i| rhs[i][1 + t] * sol[i][0]).sum();
        let v: f64 = (0..n).map(|i| rhs[i][1 + t] * sol[i][1 + t]).sum();
        mean.push(m * ys + ym);
        var.push((p.amplitude - v).max(0.0) * ys * ys);
    }
    Reference { mean, var, lml }
}

fn random_problem(rng: &mut ChaCha8Rng, n_max: usize, d_max: usize) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, KernelParams) {
    let n = rng.random_range(1..=n_max);
    let d = rng.random_range(1..=d_max);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
    let alpha: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.02 }).collect();
    let p = KernelParams::new(
        rng.random_range(0.1..10.0),
        rng.random_range(0.3..3.0),
        10f64.powf(rng.random_range(-6.0..-1.0)),
    )
    .unwrap();
    (x, y, alpha, p)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn prediction_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (x, y, alpha, p) = random_problem(&mut rng, 12, 5);
        let q = DMatrix::from_fn(4, x.ncols(), |_, _| rng.random_range(-4.0..4.0));
        let model = GpModel::with_params(&x, &y, &alpha, p).unwrap();
        let r = reference(&x, &y, &alpha, &p, model.jitter(), &q);
        let preds = model.predict(&q).unwrap();
        for (t, pr) in preds.iter().enumerate() {
            assert!(close(pr.mean, r.mean[t], 1e-8), "mean {} vs {}", pr.mean, r.mean[t]);
            assert!(close(pr.std * pr.std, r.var[t], 1e-8), "var {} vs {}", pr.std * pr.std, r.var[t]);
        }
        assert!(close(model.log_marginal_likelihood(), r.lml, 1e-8));
    }
}

#[test]
fn fit_is_bit_identical_for_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y, alpha, _) = random_problem(&mut rng, 20, 4);
    let opts = FitOptions::with_seed(9);
    let a = fit_gp(&x, &y, &alpha, &opts).unwrap();
    let b = fit_gp(&x, &y, &alpha, &opts).unwrap();
    assert_eq!(a.params(), b.params());
    let q = DMatrix::from_fn(5, x.ncols(), |i, j| (i + j) as f64 * 0.3);
    assert_eq!(a.predict(&q).unwrap(), b.predict(&q).unwrap());
}

#[test]
fn more_restarts_never_lower_the_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let (x, y, alpha, _) = random_problem(&mut rng, 25, 3);
        let one = FitOptions {
            restarts: 1,
            ..FitOptions::with_seed(seed)
        };
        let ten = FitOptions {
            restarts: 10,
            ..FitOptions::with_seed(seed)
        };
        let a = fit_gp(&x, &y, &alpha, &one).unwrap().log_marginal_likelihood();
        let b = fit_gp(&x, &y, &alpha, &ten).unwrap().log_marginal_likelihood();
        assert!(b >= a, "{b} < {a}");
    }
}

#[test]
fn serialized_model_predicts_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, y, alpha, p) = random_problem(&mut rng, 15, 3);
    let m = GpModel::with_params(&x, &y, &alpha, p).unwrap();
    let back: GpModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    let q = DMatrix::from_fn(6, x.ncols(), |i, j| i as f64 - j as f64);
    assert_eq!(m.predict(&q).unwrap(), back.predict(&q).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernel_is_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        amp in 0.01f64..10.0,
        ls in 0.05f64..5.0,
    ) {
        let p = KernelParams::new(amp, ls, 1e-6).unwrap();
        let ab = kernel_eval(&a, &b, &p, false).unwrap();
        let ba = kernel_eval(&b, &a, &p, false).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0 && ab <= amp * (1.0 + 1e-12));
    }

    #[test]
    fn training_covariance_is_positive_definite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, alpha, p) = random_problem(&mut rng, 30, 6);
        let model = GpModel::with_params(&x, &y, &alpha, p).unwrap();
        let l = model.factor();
        prop_assert!(l.diagonal().iter().all(|v| *v > 0.0 && v.is_finite()));
    }

    #[test]
    fn predictions_are_finite_and_within_prior(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, alpha, p) = random_problem(&mut rng, 20, 4);
        let model = GpModel::with_params(&x, &y, &alpha, p).unwrap();
        let q = DMatrix::from_fn(8, x.ncols(), |_, _| rng.random_range(-10.0..10.0));
        let prior = p.amplitude * model.target_scaler.scale.powi(2);
        for pr in model.predict(&q).unwrap() {
            prop_assert!(pr.mean.is_finite() && pr.std.is_finite());
            prop_assert!(pr.std >= 0.0);
            prop_assert!(pr.std * pr.std <= prior * (1.0 + 1e-9));
        }
    }
}
