//! Frozen-checkpoint stage evaluation.
//!
//! Batch metrics compare a stage's measured viabilities against the
//! predictions of the checkpoint that designed that batch. Cumulative R²
//! scores the same checkpoint on every wet-lab row available through that
//! stage.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;
use crate::surrogate::Predictor;

pub const HIT_THRESHOLDS: [f64; 2] = [50.0, 70.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Mean of `measured − predicted`.
    pub mean_signed_residual: f64,
    pub spearman_rho: Option<f64>,
    pub kendall_tau: Option<f64>,
    pub mean_sigma: f64,
    pub coverage_1s: f64,
    pub coverage_2s: f64,
    pub hit_rate_50: f64,
    pub hit_rate_70: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u32,
    pub batch: BatchMetrics,
    pub prospective_cumulative_r2: Option<f64>,
    pub cumulative_rows: usize,
}

/// Average ranks (1-based); ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks. `None` for fewer than
/// two points or a constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Pair counts behind Kendall's τ-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub pairs: u64,
    /// Pairs tied in the first argument.
    pub ties_a: u64,
    /// Pairs tied in the second argument.
    pub ties_b: u64,
    /// Concordant minus discordant.
    pub score: i64,
}

impl PairCounts {
    pub fn tau_b(&self) -> Option<f64> {
        let da = self.pairs - self.ties_a;
        let db = self.pairs - self.ties_b;
        if da == 0 || db == 0 {
            return None;
        }
        Some((self.score as f64 / ((da as f64) * (db as f64)).sqrt()).clamp(-1.0, 1.0))
    }
}

fn tied_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Merge sort on `v`, returning the number of strictly inverted pairs.
fn count_inversions(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = count_inversions(&mut v[..mid]) + count_inversions(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    swaps
}

/// Knight's O(n log n) pair counting.
pub fn pair_counts(a: &[f64], b: &[f64]) -> PairCounts {
    let n = a.len().min(b.len());
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let ties_a = tied_pairs(idx.iter().map(|&i| a[i]));
    // pairs tied in both
    let mut ties_ab = 0u64;
    let mut run = 0u64;
    for w in idx.windows(2) {
        if a[w[0]] == a[w[1]] && b[w[0]] == b[w[1]] {
            run += 1;
        } else {
            ties_ab += run * (run + 1) / 2;
            run = 0;
        }
    }
    ties_ab += run * (run + 1) / 2;
    let mut bs: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let swaps = count_inversions(&mut bs);
    let ties_b = tied_pairs(bs.iter().copied());
    let pairs = (n as u64) * (n as u64).saturating_sub(1) / 2;
    let score = pairs as i64 - ties_a as i64 - ties_b as i64 + ties_ab as i64 - 2 * swaps as i64;
    PairCounts {
        pairs,
        ties_a,
        ties_b,
        score,
    }
}

/// Kendall's τ-b; `None` when undefined (n < 2 or an all-tied input).
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pair_counts(a, b).tau_b()
}

/// Fraction of rows with `|residual| ≤ k·σ`.
pub fn coverage(measured: &[f64], mean: &[f64], sigma: &[f64], k: f64) -> f64 {
    let hits = measured
        .iter()
        .zip(mean)
        .zip(sigma)
        .filter(|((y, m), s)| (*y - *m).abs() <= k * **s)
        .count();
    hits as f64 / measured.len() as f64
}

/// Fraction of rows where prediction and measurement fall on the same side
/// of `threshold` (both ≥ or both <).
pub fn hit_rate(measured: &[f64], mean: &[f64], threshold: f64) -> f64 {
    let agree = measured
        .iter()
        .zip(mean)
        .filter(|(y, m)| (**y >= threshold) == (**m >= threshold))
        .count();
    agree as f64 / measured.len() as f64
}

pub fn batch_metrics(measured: &[f64], mean: &[f64], sigma: &[f64]) -> Result<BatchMetrics> {
    let n = measured.len();
    if n == 0 {
        return Err(Error::input("batch metrics need at least one row"));
    }
    if mean.len() != n || sigma.len() != n {
        return Err(Error::input(format!(
            "length mismatch: {n} measured, {} means, {} sigmas",
            mean.len(),
            sigma.len()
        )));
    }
    if measured.iter().chain(mean).chain(sigma).any(|v| !v.is_finite()) {
        return Err(Error::input("batch metrics need finite inputs"));
    }
    let residuals: Vec<f64> = measured.iter().zip(mean).map(|(y, m)| y - m).collect();
    Ok(BatchMetrics {
        n,
        rmse: stats::rmse(measured, mean),
        mae: residuals.iter().map(|r| r.abs()).sum::<f64>() / n as f64,
        mean_signed_residual: stats::mean(&residuals),
        spearman_rho: spearman(measured, mean),
        kendall_tau: kendall_tau_b(measured, mean),
        mean_sigma: stats::mean(sigma),
        coverage_1s: coverage(measured, mean, sigma, 1.0),
        coverage_2s: coverage(measured, mean, sigma, 2.0),
        hit_rate_50: hit_rate(measured, mean, HIT_THRESHOLDS[0]),
        hit_rate_70: hit_rate(measured, mean, HIT_THRESHOLDS[1]),
    })
}

/// Score the frozen stage-`stage` model: batch metrics on rows attributed
/// to `stage`, cumulative R² on rows attributed to stages `≤ stage`.
/// Later rows are never touched.
pub fn evaluate_stage<P: Predictor + ?Sized>(
    stage: u32,
    model: &P,
    x: &DMatrix<f64>,
    y: &[f64],
    row_stages: &[u32],
) -> Result<StageReport> {
    if x.nrows() != y.len() || row_stages.len() != y.len() {
        return Err(Error::input("wet-lab rows, targets and stages differ in length"));
    }
    let cumulative: Vec<usize> = (0..y.len()).filter(|&i| row_stages[i] <= stage).collect();
    let batch: Vec<usize> = cumulative.iter().copied().filter(|&i| row_stages[i] == stage).collect();
    if batch.is_empty() {
        return Err(Error::input(format!("no wet-lab rows attributed to stage {stage}")));
    }
    let q = x.select_rows(&cumulative);
    let preds = model.predict(&q)?;
    let yc: Vec<f64> = cumulative.iter().map(|&i| y[i]).collect();
    let mc: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let in_batch: Vec<usize> = (0..cumulative.len())
        .filter(|&k| row_stages[cumulative[k]] == stage)
        .collect();
    let yb: Vec<f64> = in_batch.iter().map(|&k| yc[k]).collect();
    let mb: Vec<f64> = in_batch.iter().map(|&k| mc[k]).collect();
    let sb: Vec<f64> = in_batch.iter().map(|&k| preds[k].std).collect();
    Ok(StageReport {
        stage,
        batch: batch_metrics(&yb, &mb, &sb)?,
        prospective_cumulative_r2: Some(stats::r_squared(&yc, &mc)),
        cumulative_rows: cumulative.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeR2 {
    pub stage: u32,
    pub rows: usize,
    pub r2: f64,
}

/// Cumulative R² for each stage whose checkpoint is present. Stages without
/// a checkpoint, or without any cumulative row, are skipped with a warning.
pub fn prospective_cumulative_r2(
    checkpoints: &[(u32, Option<&dyn Predictor>)],
    x: &DMatrix<f64>,
    y: &[f64],
    row_stages: &[u32],
) -> Result<(Vec<CumulativeR2>, Vec<String>)> {
    if x.nrows() != y.len() || row_stages.len() != y.len() {
        return Err(Error::input("wet-lab rows, targets and stages differ in length"));
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for &(stage, model) in checkpoints {
        let Some(model) = model else {
            warnings.push(format!("stage {stage}: checkpoint missing, skipped"));
            continue;
        };
        let rows: Vec<usize> = (0..y.len()).filter(|&i| row_stages[i] <= stage).collect();
        if rows.is_empty() {
            warnings.push(format!("stage {stage}: no cumulative wet-lab rows, skipped"));
            continue;
        }
        let preds = model.predict(&x.select_rows(&rows))?;
        let yc: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let mc: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        out.push(CumulativeR2 {
            stage,
            rows: rows.len(),
            r2: stats::r_squared(&yc, &mc),
        });
    }
    Ok((out, warnings))
}

/// Signatures issued at one stage by one artifact (candidate table or
/// slate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssuedSignatures {
    pub stage: u32,
    pub file: String,
    pub signatures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub wetlab_row_id: String,
    pub stage: Option<u32>,
    pub matched_file: Option<String>,
}

impl Attribution {
    pub fn is_matched(&self) -> bool {
        self.stage.is_some()
    }
}

/// Attribute each wet-lab row (`(id, signature)`) to the earliest stage that
/// issued its signature. Within a stage the first listed file wins.
/// Unmatched rows carry `stage = None`.
pub fn cross_reference(issued: &[IssuedSignatures], wetlab: &[(String, String)]) -> Vec<Attribution> {
    let mut first: BTreeMap<&str, (u32, usize)> = BTreeMap::new();
    for (k, set) in issued.iter().enumerate() {
        for sig in &set.signatures {
            let e = first.entry(sig.as_str()).or_insert((set.stage, k));
            if set.stage < e.0 {
                *e = (set.stage, k);
            }
        }
    }
    wetlab
        .iter()
        .map(|(id, sig)| match first.get(sig.as_str()) {
            Some(&(stage, k)) => Attribution {
                wetlab_row_id: id.clone(),
                stage: Some(stage),
                matched_file: Some(issued[k].file.clone()),
            },
            None => Attribution {
                wetlab_row_id: id.clone(),
                stage: None,
                matched_file: None,
            },
        })
        .collect()
}

#[derive(Serialize)]
struct StageRecord {
    stage: u32,
    n: usize,
    rmse: f64,
    mae: f64,
    mean_signed_residual: f64,
    spearman_rho: Option<f64>,
    kendall_tau: Option<f64>,
    mean_sigma: f64,
    coverage_1s: f64,
    coverage_2s: f64,
    hit_rate_50: f64,
    hit_rate_70: f64,
    prospective_cumulative_r2: Option<f64>,
    cumulative_rows: usize,
}

/// One row per stage. Undefined correlations are written as empty cells.
pub fn write_stage_reports_csv<W: Write>(reports: &[StageReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        let b = &r.batch;
        w.serialize(StageRecord {
            stage: r.stage,
            n: b.n,
            rmse: b.rmse,
            mae: b.mae,
            mean_signed_residual: b.mean_signed_residual,
            spearman_rho: b.spearman_rho,
            kendall_tau: b.kendall_tau,
            mean_sigma: b.mean_sigma,
            coverage_1s: b.coverage_1s,
            coverage_2s: b.coverage_2s,
            hit_rate_50: b.hit_rate_50,
            hit_rate_70: b.hit_rate_70,
            prospective_cumulative_r2: r.prospective_cumulative_r2,
            cumulative_rows: r.cumulative_rows,
        })?;
    }
    w.flush().map_err(|e| Error::io("<stage reports>", e))?;
    Ok(())
}

pub fn write_cumulative_csv<W: Write>(series: &[CumulativeR2], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in series {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<cumulative r2>", e))?;
    Ok(())
}

pub fn write_attribution_csv<W: Write>(rows: &[Attribution], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<attribution>", e))?;
    Ok(())
}
