//! Gaussian-process regression with a Matérn ν = 5/2 kernel.
//!
//! The covariance between standardized inputs `x1`, `x2` at Euclidean
//! distance `d` is
//!
//! ```text
//! k(d) = c · (1 + √5·d/ℓ + 5d²/(3ℓ²)) · exp(−√5·d/ℓ)  (+ σn² on the diagonal)
//! ```
//!
//! with a single isotropic length scale. Each training row carries its own
//! observation-noise term α added to the diagonal. Inputs are standardized
//! and the target normalized before fitting; predictions come back on the
//! original scale. Hyperparameters are chosen by maximizing the log marginal
//! likelihood from several seeded starting points.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal jitter ladder tried in order when factorizing `K + diag(α)`.
pub const JITTER_LADDER: [f64; 8] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Constant amplitude `c`.
    pub amplitude: f64,
    pub length_scale: f64,
    /// White-noise variance added on the diagonal of the training covariance.
    pub white_noise: f64,
}

impl KernelParams {
    pub fn new(amplitude: f64, length_scale: f64, white_noise: f64) -> Result<Self> {
        let p = KernelParams {
            amplitude,
            length_scale,
            white_noise,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.amplitude > 0.0
            && self.length_scale > 0.0
            && self.white_noise >= 0.0
            && self.amplitude.is_finite()
            && self.length_scale.is_finite()
            && self.white_noise.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!("invalid kernel parameters {self:?}")))
        }
    }

    fn from_log(theta: &[f64]) -> Self {
        KernelParams {
            amplitude: theta[0].exp(),
            length_scale: theta[1].exp(),
            white_noise: theta[2].exp(),
        }
    }
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            amplitude: 1.0,
            length_scale: 1.0,
            white_noise: 1e-5,
        }
    }
}

/// Matérn-5/2 covariance at distance `d`, without the white-noise term.
#[inline]
pub fn matern52(d: f64, params: &KernelParams) -> f64 {
    let r = SQRT5 * d / params.length_scale;
    params.amplitude * (1.0 + r + r * r / 3.0) * (-r).exp()
}

pub fn kernel_eval(x1: &[f64], x2: &[f64], params: &KernelParams, same_point: bool) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::input(format!(
            "dimension mismatch: {} vs {}",
            x1.len(),
            x2.len()
        )));
    }
    let k = matern52(stats::euclidean(x1, x2), params);
    Ok(if same_point { k + params.white_noise } else { k })
}

/// Per-feature affine standardization; zero-variance features divide by 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            scale.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.scale[j]
        })
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Target normalization; `n < 2` or constant targets keep scale 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub scale: f64,
}

impl TargetScaler {
    pub fn fit(y: &[f64]) -> Self {
        let mean = stats::mean(y);
        let s = stats::std_dev(y);
        let scale = if y.len() < 2 || !(s > 0.0) { 1.0 } else { s };
        TargetScaler { mean, scale }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

/// Anything that maps a batch of raw feature rows to (μ, σ).
pub trait Predictor {
    fn predict(&self, queries: &DMatrix<f64>) -> Result<Vec<Prediction>>;

    fn predict_row(&self, row: &[f64]) -> Result<Prediction> {
        let q = DMatrix::from_row_slice(1, row.len(), row);
        Ok(self.predict(&q)?[0])
    }
}

/// Log-space search box for the hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub amplitude: (f64, f64),
    pub length_scale: (f64, f64),
    pub white_noise: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds {
            amplitude: (1e-3, 1e3),
            length_scale: (1e-2, 1e2),
            white_noise: (1e-6, 1e1),
        }
    }
}

impl HyperBounds {
    fn log_box(&self) -> [(f64, f64); 3] {
        [self.amplitude, self.length_scale, self.white_noise].map(|(lo, hi)| (lo.ln(), hi.ln()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub bounds: HyperBounds,
    /// Likelihood evaluations allowed per restart.
    pub max_evals: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 10,
            seed: 42,
            bounds: HyperBounds::default(),
            max_evals: 300,
        }
    }
}

impl FitOptions {
    pub fn with_seed(seed: u64) -> Self {
        FitOptions {
            seed,
            ..Default::default()
        }
    }
}

/// Factorize with the jitter ladder; returns the factor and jitter used.
pub fn factorize(mut k: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut applied = 0.0;
    for &jitter in &JITTER_LADDER {
        let add = jitter - applied;
        if add > 0.0 {
            for i in 0..k.nrows() {
                k[(i, i)] += add;
            }
            applied = jitter;
        }
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok((c, applied));
        }
    }
    Err(Error::Numerical(format!(
        "covariance not positive definite after jitter {:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

fn pairwise_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let mut s = 0.0;
            for c in 0..x.ncols() {
                let t = x[(i, c)] - x[(j, c)];
                s += t * t;
            }
            let v = s.sqrt();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

fn training_covariance(dist: &DMatrix<f64>, obs_noise: &[f64], params: &KernelParams) -> DMatrix<f64> {
    let n = dist.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let k = matern52(dist[(i, j)], params);
        if i == j {
            k + params.white_noise + obs_noise[i]
        } else {
            k
        }
    })
}

struct Solved {
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    jitter: f64,
    lml: f64,
}

fn solve(dist: &DMatrix<f64>, y: &DVector<f64>, obs_noise: &[f64], params: &KernelParams) -> Result<Solved> {
    let (chol, jitter) = factorize(training_covariance(dist, obs_noise, params))?;
    let weights = chol.solve(y);
    let n = y.len() as f64;
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let lml = -0.5 * y.dot(&weights) - log_det_half - 0.5 * n * LN_2PI;
    Ok(Solved {
        chol,
        weights,
        jitter,
        lml,
    })
}

/// Standardized training data for a GP.
#[derive(Debug, Clone)]
pub struct TrainingData {
    /// Standardized inputs, n × d.
    pub inputs: DMatrix<f64>,
    /// Normalized targets.
    pub targets: DVector<f64>,
    pub obs_noise: Vec<f64>,
}

/// Log marginal likelihood on the normalized target scale.
pub fn log_marginal_likelihood(params: &KernelParams, data: &TrainingData) -> Result<f64> {
    params.validate()?;
    if data.targets.is_empty() {
        return Err(Error::input("log marginal likelihood of empty data"));
    }
    let dist = pairwise_distances(&data.inputs);
    Ok(solve(&dist, &data.targets, &data.obs_noise, params)?.lml)
}

/// Fitted GP. Immutable; predictions are on the original target scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "GpRecord", try_from = "GpRecord")]
pub struct GpModel {
    pub input_scaler: Standardizer,
    pub target_scaler: TargetScaler,
    raw_inputs: DMatrix<f64>,
    raw_targets: Vec<f64>,
    train_inputs: DMatrix<f64>,
    obs_noise: Vec<f64>,
    params: KernelParams,
    chol: Cholesky<f64, Dyn>,
    dual_weights: DVector<f64>,
    jitter: f64,
    lml: f64,
}

/// Persisted form of a [`GpModel`]; everything else is recomputed
/// deterministically on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpRecord {
    pub params: KernelParams,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub obs_noise: Vec<f64>,
    #[serde(default)]
    pub input_scaler: Option<Standardizer>,
    #[serde(default)]
    pub target_scaler: Option<TargetScaler>,
}

impl From<GpModel> for GpRecord {
    fn from(m: GpModel) -> Self {
        GpRecord {
            params: m.params,
            inputs: m
                .raw_inputs
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            targets: m.raw_targets,
            obs_noise: m.obs_noise,
            input_scaler: Some(m.input_scaler),
            target_scaler: Some(m.target_scaler),
        }
    }
}

impl TryFrom<GpRecord> for GpModel {
    type Error = Error;
    fn try_from(r: GpRecord) -> Result<Self> {
        let d = r.inputs.first().map_or(0, Vec::len);
        if r.inputs.iter().any(|row| row.len() != d) {
            return Err(Error::Checkpoint("ragged GP input matrix".into()));
        }
        let x = DMatrix::from_fn(r.inputs.len(), d, |i, j| r.inputs[i][j]);
        GpModel::with_params(&x, &r.targets, &r.obs_noise, r.params)
    }
}

fn check_training(x: &DMatrix<f64>, y: &[f64], obs_noise: &[f64]) -> Result<()> {
    if x.nrows() == 0 || y.is_empty() {
        return Err(Error::input("GP needs at least one training row"));
    }
    if x.ncols() == 0 {
        return Err(Error::input("GP needs at least one feature"));
    }
    if x.nrows() != y.len() || y.len() != obs_noise.len() {
        return Err(Error::input(format!(
            "row mismatch: {} inputs, {} targets, {} noise terms",
            x.nrows(),
            y.len(),
            obs_noise.len()
        )));
    }
    if obs_noise.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
        return Err(Error::input("observation noise must be finite and ≥ 0"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::input("training data contains non-finite values"));
    }
    Ok(())
}

impl GpModel {
    /// Condition a GP on data with fixed hyperparameters.
    pub fn with_params(x: &DMatrix<f64>, y: &[f64], obs_noise: &[f64], params: KernelParams) -> Result<Self> {
        check_training(x, y, obs_noise)?;
        params.validate()?;
        let input_scaler = Standardizer::fit(x);
        let target_scaler = TargetScaler::fit(y);
        let train_inputs = input_scaler.transform(x);
        let yn = DVector::from_iterator(
            y.len(),
            y.iter().map(|v| (v - target_scaler.mean) / target_scaler.scale),
        );
        let dist = pairwise_distances(&train_inputs);
        let s = solve(&dist, &yn, obs_noise, &params)?;
        Ok(GpModel {
            input_scaler,
            target_scaler,
            raw_inputs: x.clone(),
            raw_targets: y.to_vec(),
            train_inputs,
            obs_noise: obs_noise.to_vec(),
            params,
            chol: s.chol,
            dual_weights: s.weights,
            jitter: s.jitter,
            lml: s.lml,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n_train(&self) -> usize {
        self.raw_targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.raw_inputs.ncols()
    }

    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.train_inputs
    }

    pub fn raw_inputs(&self) -> &DMatrix<f64> {
        &self.raw_inputs
    }

    pub fn raw_targets(&self) -> &[f64] {
        &self.raw_targets
    }

    pub fn obs_noise(&self) -> &[f64] {
        &self.obs_noise
    }

    /// Lower-triangular factor `L` with `L·Lᵀ = K + diag(α) (+ jitter)`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `(K + diag(α))⁻¹ y` on the normalized target scale.
    pub fn dual_weights(&self) -> &DVector<f64> {
        &self.dual_weights
    }

    pub fn predict(&self, queries: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        if queries.ncols() != self.n_features() {
            return Err(Error::input(format!(
                "query has {} features, model expects {}",
                queries.ncols(),
                self.n_features()
            )));
        }
        let q = self.input_scaler.transform(queries);
        let n = self.n_train();
        let m = q.nrows();
        let mut kstar = DMatrix::zeros(n, m);
        for j in 0..m {
            for i in 0..n {
                let mut s = 0.0;
                for c in 0..q.ncols() {
                    let t = self.train_inputs[(i, c)] - q[(j, c)];
                    s += t * t;
                }
                kstar[(i, j)] = matern52(s.sqrt(), &self.params);
            }
        }
        let mean_n = kstar.tr_mul(&self.dual_weights);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let ts = self.target_scaler;
        Ok((0..m)
            .map(|j| {
                let explained: f64 = v.column(j).iter().map(|t| t * t).sum();
                let var = (self.params.amplitude - explained).max(0.0);
                Prediction {
                    mean: mean_n[j] * ts.scale + ts.mean,
                    std: var.sqrt() * ts.scale,
                }
            })
            .collect())
    }
}

impl Predictor for GpModel {
    fn predict(&self, queries: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        GpModel::predict(self, queries)
    }
}

/// Minimize `f` inside a box by Nelder–Mead; points are clamped to the box.
/// The best vertex never gets worse, so the result is at least as good as
/// the starting point.
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: &[f64],
    bounds: &[(f64, f64)],
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let dim = start.len();
    let clamp = |p: &mut Vec<f64>| {
        for (v, (lo, hi)) in p.iter_mut().zip(bounds) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let mut evals = 0usize;
    let mut eval = |p: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let mut p0 = start.to_vec();
    clamp(&mut p0);
    let f0 = eval(&p0, &mut evals);
    simplex.push((p0.clone(), f0));
    for i in 0..dim {
        let mut p = p0.clone();
        p[i] += step[i];
        if p[i] > bounds[i].1 {
            p[i] = p0[i] - step[i];
        }
        clamp(&mut p);
        let fp = eval(&p, &mut evals);
        simplex.push((p, fp));
    }

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        let spread = (worst - best).abs();
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| stats::euclidean(p, &simplex[0].0))
            .fold(0.0, f64::max);
        if best.is_finite() && spread <= 1e-10 * (1.0 + best.abs()) && size < 1e-6 {
            break;
        }
        let centroid: Vec<f64> = (0..dim)
            .map(|j| simplex[..dim].iter().map(|(p, _)| p[j]).sum::<f64>() / dim as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[dim].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clamp(&mut p);
            p
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[dim].1 {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[dim].1.min(fr) {
                simplex[dim] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let mut p: Vec<f64> = x0.iter().zip(&v.0).map(|(a, b)| a + 0.5 * (b - a)).collect();
                    clamp(&mut p);
                    let fp = eval(&p, &mut evals);
                    *v = (p, fp);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Fit a GP by maximizing the log marginal likelihood over log-parameters
/// from `opts.restarts` seeded log-uniform starting points. The first
/// starting point depends only on the seed, so more restarts never lower
/// the retained likelihood.
pub fn fit_gp(x: &DMatrix<f64>, y: &[f64], obs_noise: &[f64], opts: &FitOptions) -> Result<GpModel> {
    check_training(x, y, obs_noise)?;
    if opts.restarts == 0 {
        return Err(Error::input("restarts must be ≥ 1"));
    }
    let input_scaler = Standardizer::fit(x);
    let target_scaler = TargetScaler::fit(y);
    let xs = input_scaler.transform(x);
    let yn = DVector::from_iterator(
        y.len(),
        y.iter().map(|v| (v - target_scaler.mean) / target_scaler.scale),
    );
    let dist = pairwise_distances(&xs);
    let log_box = opts.bounds.log_box();
    let step: Vec<f64> = log_box.iter().map(|(lo, hi)| 0.1 * (hi - lo)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..opts.restarts {
        let start: Vec<f64> = log_box.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect();
        let objective = |theta: &[f64]| {
            let p = KernelParams::from_log(theta);
            match solve(&dist, &yn, obs_noise, &p) {
                Ok(s) if s.lml.is_finite() => -s.lml,
                _ => f64::INFINITY,
            }
        };
        let (theta, value) = nelder_mead(objective, &start, &step, &log_box, opts.max_evals);
        if best.as_ref().is_none_or(|b| value < b.1) {
            best = Some((theta, value));
        }
    }
    let (theta, value) = best.expect("restarts ≥ 1");
    if !value.is_finite() {
        return Err(Error::Numerical(
            "no hyperparameter setting gave a decomposable covariance".into(),
        ));
    }
    GpModel::with_params(x, y, obs_noise, KernelParams::from_log(&theta))
}

/// Seeded shuffled K-fold split; the first `n % k` folds get one extra row.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 && n > 1 || k == 0 {
        return Err(Error::input(format!("k = {k} folds is not allowed")));
    }
    if k > n {
        return Err(Error::input(format!("k = {k} folds exceeds n = {n} rows")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[at..at + len].to_vec());
        at += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub n: usize,
    pub rmse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldScore>,
    pub mean_rmse: f64,
    pub mean_r2: f64,
    pub std_r2: f64,
}

/// K-fold cross-validation: each fold is predicted by a GP fit on the rest.
pub fn cross_validate(
    x: &DMatrix<f64>,
    y: &[f64],
    obs_noise: &[f64],
    k: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<CvReport> {
    check_training(x, y, obs_noise)?;
    if k < 2 {
        return Err(Error::input("cross-validation needs k ≥ 2"));
    }
    let folds = fold_assignment(y.len(), k, seed)?;
    let mut scores = Vec::with_capacity(k);
    for held in &folds {
        let train: Vec<usize> = (0..y.len()).filter(|i| !held.contains(i)).collect();
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let at: Vec<f64> = train.iter().map(|&i| obs_noise[i]).collect();
        let model = fit_gp(&xt, &yt, &at, opts)?;
        let preds = model.predict(&x.select_rows(held))?;
        let yh: Vec<f64> = held.iter().map(|&i| y[i]).collect();
        let mu: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        scores.push(FoldScore {
            n: held.len(),
            rmse: stats::rmse(&yh, &mu),
            r2: stats::r_squared(&yh, &mu),
        });
    }
    let r2s: Vec<f64> = scores.iter().map(|s| s.r2).collect();
    let rmses: Vec<f64> = scores.iter().map(|s| s.rmse).collect();
    Ok(CvReport {
        mean_rmse: stats::mean(&rmses),
        mean_r2: stats::mean(&r2s),
        std_r2: stats::std_dev(&r2s),
        folds: scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(c: f64, l: f64, w: f64) -> KernelParams {
        KernelParams::new(c, l, w).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let params = p(2.0, 1.0, 0.3);
        assert_eq!(kernel_eval(&[1.0, 2.0], &[1.0, 2.0], &params, true).unwrap(), 2.3);
        // c=1, ℓ=1, d=1: (1 + √5 + 5/3)·e^{−√5}
        let k = kernel_eval(&[0.0], &[1.0], &p(1.0, 1.0, 0.0), false).unwrap();
        assert!((k - 0.523_994_8).abs() < 1e-6, "{k}");
        let far = kernel_eval(&[0.0], &[100.0], &p(1.0, 1.0, 0.0), false).unwrap();
        assert!(far < 1e-30);
        assert!(matches!(
            kernel_eval(&[0.0], &[1.0, 2.0], &params, false),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn lml_scalar_cases() {
        let data = |y: f64, alpha: f64| TrainingData {
            inputs: DMatrix::from_element(1, 1, 0.0),
            targets: DVector::from_element(1, y),
            obs_noise: vec![alpha],
        };
        // K11 + α = 2
        let v = log_marginal_likelihood(&p(1.0, 1.0, 0.0), &data(0.0, 1.0)).unwrap();
        let expected = -0.5 * 2f64.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v + 1.2655).abs() < 1e-4);
        let v = log_marginal_likelihood(&p(0.5, 1.0, 0.5), &data(0.0, 0.0)).unwrap();
        assert!((v + 0.918_938_5).abs() < 1e-6);
    }

    #[test]
    fn single_point_interpolates() {
        let x = DMatrix::from_row_slice(1, 2, &[0.3, 0.7]);
        let m = fit_gp(&x, &[42.0], &[1e-10], &FitOptions::with_seed(1)).unwrap();
        let pr = m.predict(&x).unwrap()[0];
        assert!((pr.mean - 42.0).abs() < 1e-6);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = [10.0, 20.0, 15.0];
        let params = p(1.7, 0.5, 0.0);
        let m = GpModel::with_params(&x, &y, &[0.01; 3], params).unwrap();
        let pr = m.predict(&DMatrix::from_element(1, 1, 1e4)).unwrap()[0];
        assert!((pr.mean - 15.0).abs() < 1e-9);
        let expected = 1.7f64.sqrt() * stats::std_dev(&y);
        assert!((pr.std - expected).abs() < 1e-9);
    }

    #[test]
    fn factor_reconstructs_covariance() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.5, 0.2, 1.0, 1.0, 0.3, 0.9]);
        let alpha = [0.1, 0.2, 0.05, 0.4];
        let params = p(1.3, 0.8, 0.01);
        let m = GpModel::with_params(&x, &[1.0, 2.0, 3.0, 4.0], &alpha, params).unwrap();
        let l = m.factor();
        let recon = &l * l.transpose();
        let xs = m.train_inputs();
        for i in 0..4 {
            for j in 0..4 {
                let a: Vec<f64> = xs.row(i).iter().copied().collect();
                let b: Vec<f64> = xs.row(j).iter().copied().collect();
                let mut k = kernel_eval(&a, &b, &params, i == j).unwrap();
                if i == j {
                    k += alpha[i];
                }
                assert!((recon[(i, j)] - k).abs() <= 1e-8 * k.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_variance_feature_is_harmless() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let m = fit_gp(&x, &[1.0, 2.0, 3.0], &[1e-4; 3], &FitOptions::with_seed(3)).unwrap();
        assert_eq!(m.input_scaler.scale[1], 1.0);
        assert!(m.predict(&x).unwrap().iter().all(|p| p.mean.is_finite()));
    }

    #[test]
    fn fit_is_deterministic() {
        let x = DMatrix::from_fn(12, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 3.0);
        let y: Vec<f64> = (0..12).map(|i| (i as f64).sin() * 10.0 + 50.0).collect();
        let a = fit_gp(&x, &y, &[0.1; 12], &FitOptions::with_seed(9)).unwrap();
        let b = fit_gp(&x, &y, &[0.1; 12], &FitOptions::with_seed(9)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.log_marginal_likelihood().to_bits(), b.log_marginal_likelihood().to_bits());
    }

    #[test]
    fn input_errors() {
        let x = DMatrix::<f64>::zeros(0, 2);
        assert!(matches!(fit_gp(&x, &[], &[], &FitOptions::default()), Err(Error::Input(_))));
        let x = DMatrix::from_element(2, 1, 0.0);
        let m = GpModel::with_params(&x, &[1.0, 2.0], &[0.1, 0.1], KernelParams::default()).unwrap();
        assert!(matches!(m.predict(&DMatrix::zeros(1, 3)), Err(Error::Input(_))));
        assert!(fold_assignment(3, 4, 0).is_err());
    }

    #[test]
    fn folds_partition_rows() {
        let f = fold_assignment(11, 5, 42).unwrap();
        assert_eq!(f.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 2, 2, 2]);
        let mut all: Vec<usize> = f.concat();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(f, fold_assignment(11, 5, 42).unwrap());
    }

    #[test]
    fn constant_target_cv() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let rep = cross_validate(&x, &[7.0; 10], &[0.1; 10], 5, 42, &FitOptions::default()).unwrap();
        assert!(rep.mean_rmse < 1e-6, "{}", rep.mean_rmse);
        assert_eq!(rep.mean_r2, 0.0);
    }
}
