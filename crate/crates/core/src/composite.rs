//! Literature GP plus wet-lab residual GP, with post-hoc calibration.
//!
//! The uncalibrated composite mean is the literature mean plus the residual
//! correction, `μ0 = μ_lit + μ_res`, and its variance is the sum of both
//! predictive variances. Calibration shifts the mean by `b` and scales the
//! standard deviation by `s`: `μ = μ0 + b`, `σ = s·σ0`. Both come from
//! held-out wet-lab residuals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::{fit_gp, fold_assignment, FitOptions, GpModel, Prediction, Predictor};

/// Nominal coverage targets for the ±1σ and ±2σ intervals.
pub const TARGET_COVERAGE_1S: f64 = 0.683;
pub const TARGET_COVERAGE_2S: f64 = 0.954;
/// Maximum number of calibration folds.
pub const MAX_CALIBRATION_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(rename = "alpha_literature")]
    pub literature: f64,
    #[serde(rename = "alpha_wetlab")]
    pub wetlab: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            literature: 1.0,
            wetlab: 0.02,
        }
    }
}

impl NoiseConfig {
    /// Source weight used by context-level statistics (inverse noise).
    pub fn weight(&self, source: crate::ingest::Source) -> f64 {
        match source {
            crate::ingest::Source::Literature => 1.0 / self.literature,
            crate::ingest::Source::Wetlab => 1.0 / self.wetlab,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bias_shift_percent: f64,
    pub uncertainty_scale: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            bias_shift_percent: 0.0,
            uncertainty_scale: 1.0,
        }
    }
}

/// Raw training rows for one model component.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl Samples {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::input(format!(
                "{} rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Samples { x, y })
    }

    pub fn empty(d: usize) -> Self {
        Samples {
            x: DMatrix::zeros(0, d),
            y: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Samples {
        Samples {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeModel {
    pub literature: GpModel,
    #[serde(default)]
    pub residual: Option<GpModel>,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default)]
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentPrediction {
    pub literature: Prediction,
    pub residual: Option<Prediction>,
    /// Uncalibrated composite.
    pub combined: Prediction,
}

impl CompositeModel {
    /// Literature-only model with default calibration.
    pub fn literature_only(literature: GpModel, noise: NoiseConfig) -> Self {
        CompositeModel {
            literature,
            residual: None,
            calibration: Calibration::default(),
            noise,
        }
    }

    pub fn n_features(&self) -> usize {
        self.literature.n_features()
    }

    pub fn with_calibration(mut self, calibration: Calibration) -> Result<Self> {
        if !(calibration.uncertainty_scale > 0.0) || !calibration.bias_shift_percent.is_finite() {
            return Err(Error::input(format!("invalid calibration {calibration:?}")));
        }
        self.calibration = calibration;
        Ok(self)
    }

    /// Fit the residual GP on top of an already-fitted literature GP.
    /// Residuals are `measured − literature mean`; the residual GP keeps its
    /// own target normalization.
    pub fn with_residuals(literature: GpModel, wet: &Samples, noise: NoiseConfig, opts: &FitOptions) -> Result<Self> {
        let residual = if wet.is_empty() {
            None
        } else {
            let lit = literature.predict(&wet.x)?;
            let r: Vec<f64> = wet.y.iter().zip(&lit).map(|(y, p)| y - p.mean).collect();
            let alpha = vec![noise.wetlab; r.len()];
            Some(fit_gp(&wet.x, &r, &alpha, opts)?)
        };
        Ok(CompositeModel {
            literature,
            residual,
            calibration: Calibration::default(),
            noise,
        })
    }

    pub fn predict_components(&self, queries: &DMatrix<f64>) -> Result<Vec<ComponentPrediction>> {
        let lit = self.literature.predict(queries)?;
        let res = match &self.residual {
            Some(r) => Some(r.predict(queries)?),
            None => None,
        };
        Ok(lit
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let r = res.as_ref().map(|v| v[i]);
                let combined = match r {
                    Some(r) => Prediction {
                        mean: l.mean + r.mean,
                        std: (l.std * l.std + r.std * r.std).sqrt(),
                    },
                    None => *l,
                };
                ComponentPrediction {
                    literature: *l,
                    residual: r,
                    combined,
                }
            })
            .collect())
    }

    /// Composite (μ0, σ0) before calibration.
    pub fn predict_uncalibrated(&self, queries: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        Ok(self
            .predict_components(queries)?
            .into_iter()
            .map(|c| c.combined)
            .collect())
    }

    /// Calibrated (μ, σ). Means are not clipped to [0, 100].
    pub fn predict_calibrated(&self, queries: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        let c = self.calibration;
        Ok(self
            .predict_uncalibrated(queries)?
            .into_iter()
            .map(|p| apply_calibration(p, c))
            .collect())
    }
}

pub fn apply_calibration(p: Prediction, c: Calibration) -> Prediction {
    Prediction {
        mean: p.mean + c.bias_shift_percent,
        std: c.uncertainty_scale * p.std,
    }
}

impl Predictor for CompositeModel {
    fn predict(&self, queries: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        self.predict_calibrated(queries)
    }
}

/// Fit the literature GP (α_literature per row) and the residual GP
/// (α_wetlab per row). Calibration stays at its defaults.
pub fn fit_composite(lit: &Samples, wet: &Samples, noise: NoiseConfig, opts: &FitOptions) -> Result<CompositeModel> {
    if lit.is_empty() {
        return Err(Error::input("composite model needs literature rows"));
    }
    if !wet.is_empty() && wet.x.ncols() != lit.x.ncols() {
        return Err(Error::input("literature and wet-lab feature counts differ"));
    }
    let alpha = vec![noise.literature; lit.len()];
    let literature = fit_gp(&lit.x, &lit.y, &alpha, opts)?;
    CompositeModel::with_residuals(literature, wet, noise, opts)
}

/// Fraction of rows with `|e| ≤ k·σ` (inclusive).
pub fn coverage(residuals: &[f64], std: &[f64], k: f64) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    let hits = residuals
        .iter()
        .zip(std)
        .filter(|(e, s)| e.abs() <= k * **s)
        .count();
    hits as f64 / residuals.len() as f64
}

/// Scale grid 0.50, 0.55, …, 3.00.
pub fn scale_grid() -> impl Iterator<Item = f64> {
    (0..=50).map(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub bias_shift: f64,
    pub uncertainty_scale: f64,
    pub coverage_1s_before: f64,
    pub coverage_2s_before: f64,
    pub coverage_1s_after: f64,
    pub coverage_2s_after: f64,
}

/// Estimate `(b, s)` from held-out residuals `e = y − μ0` and their σ0.
/// `b` is the mean residual; `s` minimizes the combined 1σ/2σ coverage gap
/// of the bias-corrected residuals over [`scale_grid`], ties going to the
/// smallest scale.
pub fn fit_calibration(residuals: &[f64], std0: &[f64]) -> Result<CalibrationFit> {
    if residuals.is_empty() || residuals.len() != std0.len() {
        return Err(Error::input("calibration needs matching, non-empty residuals"));
    }
    let b = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let centered: Vec<f64> = residuals.iter().map(|e| e - b).collect();
    let gap = |s: f64| {
        let scaled: Vec<f64> = std0.iter().map(|v| v * s).collect();
        (coverage(&centered, &scaled, 1.0) - TARGET_COVERAGE_1S).abs()
            + (coverage(&centered, &scaled, 2.0) - TARGET_COVERAGE_2S).abs()
    };
    let mut best = (f64::INFINITY, 1.0);
    for s in scale_grid() {
        let g = gap(s);
        if g < best.0 {
            best = (g, s);
        }
    }
    let s = best.1;
    let scaled: Vec<f64> = std0.iter().map(|v| v * s).collect();
    Ok(CalibrationFit {
        bias_shift: b,
        uncertainty_scale: s,
        coverage_1s_before: coverage(&centered, std0, 1.0),
        coverage_2s_before: coverage(&centered, std0, 2.0),
        coverage_1s_after: coverage(&centered, &scaled, 1.0),
        coverage_2s_after: coverage(&centered, &scaled, 2.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutResidual {
    pub row: usize,
    pub fold: usize,
    pub measured: f64,
    pub mean0: f64,
    pub std0: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub folds: usize,
    pub held_out: Vec<HeldOutResidual>,
    pub fit: Option<CalibrationFit>,
}

impl CalibrationReport {
    pub fn calibration(&self) -> Calibration {
        self.fit.map_or_else(Calibration::default, |f| Calibration {
            bias_shift_percent: f.bias_shift,
            uncertainty_scale: f.uncertainty_scale,
        })
    }
}

/// Cross-validate over wet-lab rows only (K = min(5, n_wet) folds). The
/// literature GP, trained on every literature row, is shared by all folds;
/// each fold refits the residual GP on the remaining wet-lab rows.
pub fn estimate_calibration(model: &CompositeModel, wet: &Samples, opts: &FitOptions, seed: u64) -> Result<CalibrationReport> {
    let n = wet.len();
    if n == 0 {
        return Ok(CalibrationReport {
            folds: 0,
            held_out: vec![],
            fit: None,
        });
    }
    let k = n.min(MAX_CALIBRATION_FOLDS);
    let folds = if k == 1 {
        vec![vec![0]]
    } else {
        fold_assignment(n, k, seed)?
    };
    let mut held_out = Vec::with_capacity(n);
    for (f, held) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
        let fold_model = CompositeModel::with_residuals(
            model.literature.clone(),
            &wet.select(&train),
            model.noise,
            opts,
        )?;
        let preds = fold_model.predict_uncalibrated(&wet.x.select_rows(held))?;
        for (&row, p) in held.iter().zip(preds) {
            held_out.push(HeldOutResidual {
                row,
                fold: f,
                measured: wet.y[row],
                mean0: p.mean,
                std0: p.std,
                residual: wet.y[row] - p.mean,
            });
        }
    }
    held_out.sort_by_key(|h| h.row);
    let e: Vec<f64> = held_out.iter().map(|h| h.residual).collect();
    let s: Vec<f64> = held_out.iter().map(|h| h.std0).collect();
    Ok(CalibrationReport {
        folds: k,
        fit: Some(fit_calibration(&e, &s)?),
        held_out,
    })
}

/// Fit the composite and attach the calibration estimated from it.
pub fn fit_calibrated(lit: &Samples, wet: &Samples, noise: NoiseConfig, opts: &FitOptions) -> Result<(CompositeModel, CalibrationReport)> {
    let model = fit_composite(lit, wet, noise, opts)?;
    let report = estimate_calibration(&model, wet, opts, opts.seed)?;
    let cal = report.calibration();
    Ok((model.with_calibration(cal)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::KernelParams;

    fn lit() -> Samples {
        let x = DMatrix::from_fn(15, 2, |i, j| ((i * 5 + j * 7) % 13) as f64 / 4.0);
        let y = (0..15)
            .map(|i| 40.0 + 3.0 * x[(i, 0)] - 2.0 * x[(i, 1)])
            .collect();
        Samples::new(x, y).unwrap()
    }

    fn quick() -> FitOptions {
        FitOptions {
            restarts: 2,
            ..FitOptions::default()
        }
    }

    #[test]
    fn empty_wet_is_literature_model() {
        let l = lit();
        let m = fit_composite(&l, &Samples::empty(2), NoiseConfig::default(), &quick()).unwrap();
        assert!(m.residual.is_none());
        assert_eq!(m.calibration, Calibration::default());
        let q = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 2.0, 1.0]);
        let a = m.predict_calibrated(&q).unwrap();
        let b = m.literature.predict(&q).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_residual_row_gives_no_correction() {
        let l = lit();
        let base = fit_composite(&l, &Samples::empty(2), NoiseConfig::default(), &quick()).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 1.5]);
        let y = base.literature.predict(&x).unwrap()[0].mean;
        let m = CompositeModel::with_residuals(
            base.literature.clone(),
            &Samples::new(x.clone(), vec![y]).unwrap(),
            NoiseConfig::default(),
            &quick(),
        )
        .unwrap();
        let c = m.predict_components(&x).unwrap()[0];
        assert!(c.residual.unwrap().mean.abs() < 0.5);
    }

    #[test]
    fn noise_ratio() {
        let n = NoiseConfig::default();
        assert!((n.literature / n.wetlab - 50.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_arithmetic() {
        let l = lit();
        let m = fit_composite(&l, &Samples::empty(2), NoiseConfig::default(), &quick())
            .unwrap()
            .with_calibration(Calibration {
                bias_shift_percent: -6.83,
                uncertainty_scale: 0.78,
            })
            .unwrap();
        let p = apply_calibration(Prediction { mean: 70.0, std: 10.0 }, m.calibration);
        assert!((p.mean - 63.17).abs() < 1e-12);
        assert!((p.std - 7.80).abs() < 1e-12);
        let z = apply_calibration(Prediction { mean: 70.0, std: 0.0 }, m.calibration);
        assert_eq!(z.std, 0.0);
        assert!(m
            .clone()
            .with_calibration(Calibration {
                bias_shift_percent: 0.0,
                uncertainty_scale: 0.0
            })
            .is_err());
    }

    #[test]
    fn constant_offset_recovers_bias_exactly() {
        let e = vec![5.0; 12];
        let s = vec![1.0; 12];
        let fit = fit_calibration(&e, &s).unwrap();
        assert_eq!(fit.bias_shift, 5.0);
        // every centered residual is zero, so coverage is 1 for all s: the
        // smallest grid value wins
        assert_eq!(fit.uncertainty_scale, 0.5);
    }

    #[test]
    fn empty_wet_calibration_is_default() {
        let l = lit();
        let m = fit_composite(&l, &Samples::empty(2), NoiseConfig::default(), &quick()).unwrap();
        let rep = estimate_calibration(&m, &Samples::empty(2), &quick(), 0).unwrap();
        assert_eq!(rep.folds, 0);
        assert_eq!(rep.calibration(), Calibration::default());
    }

    #[test]
    fn fold_count_follows_min_rule() {
        let l = lit();
        let wet_x = DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 1.5, 2.0, 2.5, 0.2]);
        let wet = Samples::new(wet_x, vec![50.0, 60.0, 45.0]).unwrap();
        let m = fit_composite(&l, &wet, NoiseConfig::default(), &quick()).unwrap();
        let rep = estimate_calibration(&m, &wet, &quick(), 1).unwrap();
        assert_eq!(rep.folds, 3);
        assert_eq!(rep.held_out.len(), 3);
        let single = Samples::new(DMatrix::from_row_slice(1, 2, &[0.5, 0.5]), vec![50.0]).unwrap();
        let rep = estimate_calibration(&m, &single, &quick(), 1).unwrap();
        assert_eq!(rep.folds, 1);
        // with no other wet rows the fold model is the literature GP alone
        let lit_mu = m.literature.predict(&single.x).unwrap()[0].mean;
        assert!((rep.fit.unwrap().bias_shift - (50.0 - lit_mu)).abs() < 1e-9);
    }

    #[test]
    fn serde_defaults_calibration() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let gp = GpModel::with_params(&x, &[1.0, 2.0], &[0.1, 0.1], KernelParams::default()).unwrap();
        let json = serde_json::json!({ "literature": serde_json::to_value(&gp).unwrap() });
        let m: CompositeModel = serde_json::from_value(json).unwrap();
        assert_eq!(m.calibration, Calibration::default());
        assert_eq!(m.noise, NoiseConfig::default());
    }
}
