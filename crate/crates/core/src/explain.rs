//! Interpretability artifacts: weighted permutation importance, kernel SHAP,
//! support-aware landscape grids and an uncertainty dashboard. Every grid is
//! written as CSV; the SVG files are quick-look renderings of the same data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::campaign::write_atomic;
use crate::error::{Error, Result};
use crate::ingest::FeatureColumn;
use crate::optimizer::{acquisition_terms, AcquisitionConfig, ObservedContext, SearchSpace};
use crate::stats;
use crate::surrogate::Predictor;

pub const SUPPORT_QUANTILES: (f64, f64) = (0.01, 0.95);
pub const UNCERTAINTY_MULTIPLIERS: [f64; 9] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5];
pub const VIABILITY_BANDS: [(f64, f64); 4] = [(0.0, 25.0), (25.0, 50.0), (50.0, 75.0), (75.0, 100.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Permutation,
    Shap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub feature: usize,
    pub score: f64,
    /// 1-based; rank 1 is the most important.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub method: AttributionMethod,
    /// Indexed by feature.
    pub entries: Vec<Attribution>,
}

impl AttributionTable {
    /// Rank scores descending; ties go to the lower feature index.
    pub fn from_scores(method: AttributionMethod, scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut entries: Vec<Attribution> = scores
            .into_iter()
            .enumerate()
            .map(|(feature, score)| Attribution { feature, score, rank: 0 })
            .collect();
        for (r, &j) in order.iter().enumerate() {
            entries[j].rank = r + 1;
        }
        AttributionTable { method, entries }
    }

    /// Feature indices from most to least important.
    pub fn ranking(&self) -> Vec<usize> {
        let mut e: Vec<&Attribution> = self.entries.iter().collect();
        e.sort_by_key(|a| a.rank);
        e.into_iter().map(|a| a.feature).collect()
    }

    pub fn score(&self, feature: usize) -> f64 {
        self.entries[feature].score
    }
}

/// Mean drop in weighted R² when one column is shuffled, over `repeats`
/// seeded shuffles per feature.
pub fn permutation_importance<P: Predictor + ?Sized>(
    model: &P,
    x: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<AttributionTable> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::input("permutation importance needs rows"));
    }
    if y.len() != n || weights.len() != n {
        return Err(Error::input("rows, targets and weights differ in length"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::input("weights must be ≥ 0"));
    }
    let score = |m: &DMatrix<f64>| -> Result<f64> {
        let mu: Vec<f64> = model.predict(m)?.into_iter().map(|p| p.mean).collect();
        stats::weighted_r_squared(y, &mu, weights).ok_or_else(|| Error::input("total weight is zero"))
    };
    let baseline = score(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let column: Vec<f64> = x.column(j).iter().copied().collect();
        if column.iter().all(|v| *v == column[0]) {
            scores.push(0.0);
            continue;
        }
        let mut total = 0.0;
        for _ in 0..repeats.max(1) {
            let mut perm = column.clone();
            perm.shuffle(&mut rng);
            let mut xp = x.clone();
            for (i, v) in perm.into_iter().enumerate() {
                xp[(i, j)] = v;
            }
            total += baseline - score(&xp)?;
        }
        scores.push(total / repeats.max(1) as f64);
    }
    Ok(AttributionTable::from_scores(AttributionMethod::Permutation, scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapValues {
    /// Mean background prediction.
    pub base_value: f64,
    /// One row per explained sample, one column per feature.
    pub values: DMatrix<f64>,
    /// Model predictions for the explained rows.
    pub predictions: Vec<f64>,
}

impl ShapValues {
    /// Mean |φ| per feature.
    pub fn mean_abs(&self) -> AttributionTable {
        let scores = (0..self.values.ncols())
            .map(|j| self.values.column(j).iter().map(|v| v.abs()).sum::<f64>() / self.values.nrows().max(1) as f64)
            .collect();
        AttributionTable::from_scores(AttributionMethod::Shap, scores)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of a coalition of size `s` among `m` players.
pub fn shapley_kernel_weight(m: usize, s: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, s) * s as f64 * (m - s) as f64)
}

/// Value of a coalition: mean prediction with the coalition's features taken
/// from `x` and the others from each background row.
fn coalition_values<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    background: &DMatrix<f64>,
    coalitions: &[Vec<bool>],
    features: &[usize],
) -> Result<Vec<f64>> {
    let nb = background.nrows();
    let d = x.len();
    let mut out = Vec::with_capacity(coalitions.len());
    let per_chunk = (4096 / nb).max(1);
    for chunk in coalitions.chunks(per_chunk) {
        let mut q = DMatrix::zeros(chunk.len() * nb, d);
        for (c, z) in chunk.iter().enumerate() {
            for b in 0..nb {
                let r = c * nb + b;
                for j in 0..d {
                    q[(r, j)] = background[(b, j)];
                }
                for (k, &j) in features.iter().enumerate() {
                    if z[k] {
                        q[(r, j)] = x[j];
                    }
                }
            }
        }
        let preds = model.predict(&q)?;
        for c in 0..chunk.len() {
            out.push(preds[c * nb..(c + 1) * nb].iter().map(|p| p.mean).sum::<f64>() / nb as f64);
        }
    }
    Ok(out)
}

/// Kernel SHAP with a native coalition sampler and constrained weighted
/// least squares.
///
/// Features whose value in the explained row equals every background value
/// cannot change the prediction and get φ = 0. Among the remaining `m`
/// features, all `2^m − 2` proper coalitions are enumerated when that fits in
/// `samples`; otherwise coalition sizes are drawn from the Shapley kernel and
/// each draw is paired with its complement. The efficiency constraint
/// `base + Σφ = f(x)` is imposed exactly by eliminating one variable.
pub fn kernel_shap<P: Predictor + ?Sized>(
    model: &P,
    background: &DMatrix<f64>,
    explained: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<ShapValues> {
    let d = background.ncols();
    if background.nrows() == 0 {
        return Err(Error::input("kernel SHAP needs background rows"));
    }
    if explained.ncols() != d {
        return Err(Error::input("explained and background feature counts differ"));
    }
    if samples < d + 2 {
        return Err(Error::input(format!(
            "kernel SHAP needs at least {} coalition samples for {d} features, got {samples}",
            d + 2
        )));
    }
    let base_value = stats::mean(&model.predict(background)?.iter().map(|p| p.mean).collect::<Vec<_>>());
    let predictions: Vec<f64> = model.predict(explained)?.iter().map(|p| p.mean).collect();
    let mut values = DMatrix::zeros(explained.nrows(), d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for r in 0..explained.nrows() {
        let x: Vec<f64> = explained.row(r).iter().copied().collect();
        let features: Vec<usize> = (0..d)
            .filter(|&j| background.column(j).iter().any(|b| *b != x[j]))
            .collect();
        let m = features.len();
        let delta = predictions[r] - base_value;
        match m {
            0 => continue,
            1 => {
                values[(r, features[0])] = delta;
                continue;
            }
            _ => {}
        }
        let (coalitions, weights) = if m < 63 && (1u64 << m) - 2 <= samples as u64 {
            let mut zs = Vec::new();
            let mut ws = Vec::new();
            for mask in 1..(1u64 << m) - 1 {
                let z: Vec<bool> = (0..m).map(|k| mask >> k & 1 == 1).collect();
                let s = z.iter().filter(|b| **b).count();
                ws.push(shapley_kernel_weight(m, s));
                zs.push(z);
            }
            (zs, ws)
        } else {
            let size_w: Vec<f64> = (1..m).map(|s| (m - 1) as f64 / (s * (m - s)) as f64).collect();
            let total: f64 = size_w.iter().sum();
            let mut zs = Vec::with_capacity(samples);
            let mut idx: Vec<usize> = (0..m).collect();
            while zs.len() + 1 < samples {
                let mut u = rng.random::<f64>() * total;
                let mut s = m - 1;
                for (k, w) in size_w.iter().enumerate() {
                    if u < *w {
                        s = k + 1;
                        break;
                    }
                    u -= w;
                }
                idx.shuffle(&mut rng);
                let mut z = vec![false; m];
                for &k in &idx[..s] {
                    z[k] = true;
                }
                let comp: Vec<bool> = z.iter().map(|b| !b).collect();
                zs.push(z);
                zs.push(comp);
            }
            let n = zs.len();
            (zs, vec![1.0; n])
        };
        let v = coalition_values(model, &x, background, &coalitions, &features)?;
        // φ_last = delta − Σ others
        let p = m - 1;
        let mut a = DMatrix::zeros(coalitions.len(), p);
        let mut b = DVector::zeros(coalitions.len());
        for (i, z) in coalitions.iter().enumerate() {
            let sw = weights[i].sqrt();
            let zl = if z[p] { 1.0 } else { 0.0 };
            for k in 0..p {
                let zk = if z[k] { 1.0 } else { 0.0 };
                a[(i, k)] = sw * (zk - zl);
            }
            b[i] = sw * (v[i] - base_value - zl * delta);
        }
        let svd = a.svd(true, true);
        let phi = svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::Numerical(format!("SHAP regression failed: {e}")))?;
        let mut sum = 0.0;
        for k in 0..p {
            values[(r, features[k])] = phi[k];
            sum += phi[k];
        }
        values[(r, features[p])] = delta - sum;
    }
    Ok(ShapValues {
        base_value,
        values,
        predictions,
    })
}

/// Per-feature weighted `[q01, q95]` window of the observed context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportWindow {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SupportWindow {
    pub fn from_context(context: &ObservedContext) -> Self {
        let (ql, qu) = SUPPORT_QUANTILES;
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for j in 0..context.dim() {
            let col: Vec<f64> = context.rows.column(j).iter().copied().collect();
            let lo = stats::weighted_quantile(&col, &context.weights, ql).unwrap_or(0.0);
            let hi = stats::weighted_quantile(&col, &context.weights, qu).unwrap_or(lo);
            lower.push(lo);
            upper.push(hi.max(lo));
        }
        SupportWindow { lower, upper }
    }

    pub fn is_degenerate(&self, j: usize) -> bool {
        self.upper[j] <= self.lower[j]
    }

    pub fn axis(&self, j: usize, points: usize) -> Vec<f64> {
        let (lo, hi) = (self.lower[j], self.upper[j]);
        if points < 2 {
            return vec![lo];
        }
        (0..points)
            .map(|k| {
                if k + 1 == points {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (points - 1) as f64
                }
            })
            .collect()
    }
}

/// Weighted median of each feature over the context.
pub fn plotting_baseline(context: &ObservedContext) -> Vec<f64> {
    (0..context.dim())
        .map(|j| {
            let col: Vec<f64> = context.rows.column(j).iter().copied().collect();
            stats::weighted_median(&col, &context.weights).unwrap_or(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub marginal_features: usize,
    pub interaction_pairs: usize,
    pub resolution_1d: usize,
    pub resolution_2d: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            marginal_features: 6,
            interaction_pairs: 3,
            resolution_1d: 200,
            resolution_2d: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    pub feature: usize,
    pub values: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub supported: Vec<bool>,
}

/// Row-major grid over two features: cell `(i, k)` sits at
/// `(xs[i], ys[k])` and is stored at index `i · ys.len() + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2d {
    pub features: (usize, usize),
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Static acquisition score; filled for the acquisition grid only.
    pub score: Option<Vec<f64>>,
    pub supported: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub baseline: Vec<f64>,
    pub window: SupportWindow,
    pub marginals: Vec<Marginal>,
    pub interactions: Vec<Grid2d>,
    pub acquisition: Option<Grid2d>,
    pub warnings: Vec<String>,
}

fn grid_2d<P: Predictor + ?Sized>(
    model: &P,
    context: &ObservedContext,
    space: &SearchSpace,
    acq: Option<&AcquisitionConfig>,
    baseline: &[f64],
    window: &SupportWindow,
    (a, b): (usize, usize),
    res: usize,
) -> Result<Grid2d> {
    let xs = window.axis(a, res);
    let ys = window.axis(b, res);
    let points: Vec<Vec<f64>> = xs
        .iter()
        .flat_map(|&u| {
            ys.iter().map(move |&v| {
                let mut p = baseline.to_vec();
                p[a] = u;
                p[b] = v;
                p
            })
        })
        .collect();
    let q = DMatrix::from_fn(points.len(), baseline.len(), |i, j| points[i][j]);
    let preds = model.predict(&q)?;
    let supported: Vec<bool> = points.iter().map(|p| context.is_supported(p)).collect();
    let score = acq.map(|cfg| {
        points
            .iter()
            .zip(&preds)
            .map(|(p, pr)| acquisition_terms(*pr, p, context, space, &[], cfg).static_score())
            .collect()
    });
    Ok(Grid2d {
        features: (a, b),
        xs,
        ys,
        mean: preds.iter().map(|p| p.mean).collect(),
        std: preds.iter().map(|p| p.std).collect(),
        score,
        supported,
    })
}

/// Marginal curves for the top features, interaction grids for the top
/// pairs, and a static acquisition grid over the top pair. Held-out features
/// sit at the weighted-median baseline; features whose support window is a
/// single point are skipped.
pub fn landscape_grids<P: Predictor + ?Sized>(
    model: &P,
    context: &ObservedContext,
    space: &SearchSpace,
    ranking: &AttributionTable,
    acquisition: &AcquisitionConfig,
    cfg: &GridConfig,
) -> Result<Landscape> {
    let window = SupportWindow::from_context(context);
    let baseline = plotting_baseline(context);
    let mut warnings = Vec::new();
    let ranked: Vec<usize> = ranking
        .ranking()
        .into_iter()
        .filter(|&j| !window.is_degenerate(j))
        .collect();
    let top: Vec<usize> = ranked.iter().copied().take(cfg.marginal_features).collect();
    if top.len() < cfg.marginal_features {
        warnings.push(format!(
            "only {} features have a non-degenerate support window; {} requested",
            top.len(),
            cfg.marginal_features
        ));
    }
    let mut marginals = Vec::new();
    for &j in &top {
        let values = window.axis(j, cfg.resolution_1d);
        let q = DMatrix::from_fn(values.len(), baseline.len(), |i, k| if k == j { values[i] } else { baseline[k] });
        let preds = model.predict(&q)?;
        let supported = q
            .row_iter()
            .map(|r| context.is_supported(&r.iter().copied().collect::<Vec<_>>()))
            .collect();
        marginals.push(Marginal {
            feature: j,
            values,
            mean: preds.iter().map(|p| p.mean).collect(),
            std: preds.iter().map(|p| p.std).collect(),
            supported,
        });
    }
    let mut pairs = Vec::new();
    'outer: for i in 0..top.len() {
        for k in i + 1..top.len() {
            if pairs.len() == cfg.interaction_pairs {
                break 'outer;
            }
            pairs.push((top[i], top[k]));
        }
    }
    if pairs.len() < cfg.interaction_pairs {
        warnings.push(format!(
            "only {} interaction pairs available; {} requested",
            pairs.len(),
            cfg.interaction_pairs
        ));
    }
    let mut interactions = Vec::new();
    for &p in &pairs {
        interactions.push(grid_2d(model, context, space, None, &baseline, &window, p, cfg.resolution_2d)?);
    }
    let acquisition_grid = match pairs.first() {
        Some(&p) => Some(grid_2d(
            model,
            context,
            space,
            Some(acquisition),
            &baseline,
            &window,
            p,
            cfg.resolution_2d,
        )?),
        None => None,
    };
    Ok(Landscape {
        baseline,
        window,
        marginals,
        interactions,
        acquisition: acquisition_grid,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViabilityBand {
    pub lower: f64,
    pub upper: f64,
    pub rows: usize,
    pub mean_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDashboard {
    /// `(multiplier, coverage)` pairs.
    pub coverage_curve: Vec<(f64, f64)>,
    /// `(|error|, σ)` per row.
    pub error_vs_sigma: Vec<(f64, f64)>,
    pub bands: Vec<ViabilityBand>,
}

/// Coverage against multiplier, |error| against σ, and mean σ by measured
/// viability band (the last band includes 100).
pub fn uncertainty_dashboard<P: Predictor + ?Sized>(model: &P, x: &DMatrix<f64>, y: &[f64]) -> Result<UncertaintyDashboard> {
    if x.nrows() != y.len() {
        return Err(Error::input("rows and targets differ in length"));
    }
    if y.is_empty() {
        return Ok(UncertaintyDashboard {
            coverage_curve: UNCERTAINTY_MULTIPLIERS.iter().map(|&m| (m, 0.0)).collect(),
            error_vs_sigma: Vec::new(),
            bands: VIABILITY_BANDS
                .iter()
                .map(|&(lower, upper)| ViabilityBand { lower, upper, rows: 0, mean_sigma: None })
                .collect(),
        });
    }
    let preds = model.predict(x)?;
    let mu: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let sd: Vec<f64> = preds.iter().map(|p| p.std).collect();
    let coverage_curve = UNCERTAINTY_MULTIPLIERS
        .iter()
        .map(|&m| (m, crate::evaluate::coverage(y, &mu, &sd, m)))
        .collect();
    let error_vs_sigma = y.iter().zip(&preds).map(|(v, p)| ((v - p.mean).abs(), p.std)).collect();
    let last = VIABILITY_BANDS.len() - 1;
    let bands = VIABILITY_BANDS
        .iter()
        .enumerate()
        .map(|(k, &(lower, upper))| {
            let s: Vec<f64> = y
                .iter()
                .zip(&sd)
                .filter(|(v, _)| **v >= lower && (**v < upper || (k == last && **v <= upper)))
                .map(|(_, s)| *s)
                .collect();
            ViabilityBand {
                lower,
                upper,
                rows: s.len(),
                mean_sigma: (!s.is_empty()).then(|| stats::mean(&s)),
            }
        })
        .collect();
    Ok(UncertaintyDashboard {
        coverage_curve,
        error_vs_sigma,
        bands,
    })
}

// ---- rendering -------------------------------------------------------------

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().filter(|x| x.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn axis_labels(s: &mut String, x: (f64, f64), y: (f64, f64), xl: &str, yl: &str) {
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{:.3}</text>"#, H - PAD + 14.0, x.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, W - PAD, H - PAD + 14.0, x.1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(xl));
    let _ = writeln!(s, r#"<text x="4" y="{}">{:.2}</text>"#, H - PAD, y.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">{:.2}</text>"#, PAD + 4.0, y.1);
    let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, PAD - 8.0, escape(yl));
}

/// Line plot; segments between two unsupported points are dashed.
pub fn svg_line(title: &str, xl: &str, yl: &str, xs: &[f64], ys: &[f64], supported: Option<&[bool]>) -> String {
    let mut s = svg_open(title);
    let (x0, x1) = span(xs);
    let (y0, y1) = span(ys);
    let px = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);
    for k in 1..xs.len().min(ys.len()) {
        let dashed = supported.is_some_and(|m| !m[k - 1] && !m[k]);
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#1f77b4" stroke-width="1.5"{}/>"##,
            px(xs[k - 1]),
            py(ys[k - 1]),
            px(xs[k]),
            py(ys[k]),
            if dashed { r#" stroke-dasharray="4 3""# } else { "" }
        );
    }
    axis_labels(&mut s, (x0, x1), (y0, y1), xl, yl);
    s.push_str("</svg>\n");
    s
}

/// Horizontal bar chart.
pub fn svg_bars(title: &str, labels: &[String], values: &[f64]) -> String {
    let mut s = svg_open(title);
    let n = values.len().max(1);
    let (_, hi) = span(&values.iter().map(|v| v.max(0.0)).chain([0.0]).collect::<Vec<_>>());
    let bar_h = (H - 2.0 * PAD) / n as f64;
    for (k, (l, v)) in labels.iter().zip(values).enumerate() {
        let y = PAD + k as f64 * bar_h;
        let w = v.max(0.0) / hi * (W - 2.0 * PAD - 90.0);
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"/>"##,
            PAD + 90.0,
            y + 1.0,
            w,
            (bar_h - 2.0).max(1.0)
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, PAD + 86.0, y + bar_h * 0.7, escape(l));
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of `values` on a grid; unsupported cells are drawn translucent.
pub fn svg_heatmap(title: &str, xl: &str, yl: &str, grid: &Grid2d, values: &[f64]) -> String {
    let mut s = svg_open(title);
    let (nx, ny) = (grid.xs.len(), grid.ys.len());
    let (v0, v1) = span(values);
    let cw = (W - 2.0 * PAD) / nx as f64;
    let ch = (H - 2.0 * PAD) / ny as f64;
    for i in 0..nx {
        for k in 0..ny {
            let idx = i * ny + k;
            let t = ((values[idx] - v0) / (v1 - v0)).clamp(0.0, 1.0);
            let (r, g, b) = ((255.0 * t) as u8, (80.0 + 100.0 * (1.0 - t)) as u8, (255.0 * (1.0 - t)) as u8);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({r},{g},{b})"{}/>"#,
                PAD + i as f64 * cw,
                H - PAD - (k + 1) as f64 * ch,
                cw + 0.1,
                ch + 0.1,
                if grid.supported[idx] { "" } else { r#" fill-opacity="0.35""# }
            );
        }
    }
    axis_labels(&mut s, span(&grid.xs), span(&grid.ys), xl, yl);
    s.push_str("</svg>\n");
    s
}

// ---- artifacts -------------------------------------------------------------

/// Everything `explain` produces for one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainReport {
    pub importance: AttributionTable,
    pub shap: Option<ShapValues>,
    pub landscape: Landscape,
    pub dashboard: UncertaintyDashboard,
}

fn csv_bytes<F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w)?;
    w.into_inner().map_err(|e| Error::input(format!("csv buffer: {e}")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Write CSV grids and SVG renderings under `dir`; returns the paths
/// written.
pub fn write_artifacts(dir: &Path, report: &ExplainReport, columns: &[FeatureColumn]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    let name = |j: usize| columns.get(j).map_or_else(|| format!("f{j}"), |c| c.name());

    let imp = &report.importance;
    put(
        "feature_importance.csv".into(),
        csv_bytes(|w| {
            w.write_record(["feature", "importance", "rank", "method"])?;
            for e in &imp.entries {
                w.write_record([name(e.feature), e.score.to_string(), e.rank.to_string(), "permutation".into()])?;
            }
            Ok(())
        })?,
    )?;
    let order = imp.ranking();
    put(
        "feature_importance.svg".into(),
        svg_bars(
            "Weighted permutation importance",
            &order.iter().take(12).map(|&j| name(j)).collect::<Vec<_>>(),
            &order.iter().take(12).map(|&j| imp.score(j)).collect::<Vec<_>>(),
        )
        .into_bytes(),
    )?;

    if let Some(shap) = &report.shap {
        put(
            "shap_values.csv".into(),
            csv_bytes(|w| {
                let mut h = vec!["row".to_string(), "base_value".into(), "prediction".into()];
                h.extend((0..shap.values.ncols()).map(name));
                w.write_record(&h)?;
                for r in 0..shap.values.nrows() {
                    let mut rec = vec![r.to_string(), shap.base_value.to_string(), shap.predictions[r].to_string()];
                    rec.extend(shap.values.row(r).iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
                Ok(())
            })?,
        )?;
        let summary = shap.mean_abs();
        put(
            "shap_summary.csv".into(),
            csv_bytes(|w| {
                w.write_record(["feature", "mean_abs_shap", "rank"])?;
                for e in &summary.entries {
                    w.write_record([name(e.feature), e.score.to_string(), e.rank.to_string()])?;
                }
                Ok(())
            })?,
        )?;
        let so = summary.ranking();
        put(
            "shap_summary.svg".into(),
            svg_bars(
                "Mean |SHAP|",
                &so.iter().take(12).map(|&j| name(j)).collect::<Vec<_>>(),
                &so.iter().take(12).map(|&j| summary.score(j)).collect::<Vec<_>>(),
            )
            .into_bytes(),
        )?;
    }

    let land = &report.landscape;
    for m in &land.marginals {
        let f = name(m.feature);
        put(
            format!("partial_dependence_{f}.csv"),
            csv_bytes(|w| {
                w.write_record([f.as_str(), "mean", "std", "supported"])?;
                for k in 0..m.values.len() {
                    w.write_record([
                        m.values[k].to_string(),
                        m.mean[k].to_string(),
                        m.std[k].to_string(),
                        m.supported[k].to_string(),
                    ])?;
                }
                Ok(())
            })?,
        )?;
        put(
            format!("partial_dependence_{f}.svg"),
            svg_line(&format!("Marginal response: {f}"), &f, "viability (%)", &m.values, &m.mean, Some(&m.supported))
                .into_bytes(),
        )?;
    }
    let grid_csv = |g: &Grid2d| {
        csv_bytes(|w| {
            let (a, b) = (name(g.features.0), name(g.features.1));
            let mut h = vec![a, b, "mean".into(), "std".into()];
            if g.score.is_some() {
                h.push("static_score".into());
            }
            h.push("supported".into());
            w.write_record(&h)?;
            for i in 0..g.xs.len() {
                for k in 0..g.ys.len() {
                    let idx = i * g.ys.len() + k;
                    let mut rec = vec![g.xs[i].to_string(), g.ys[k].to_string(), g.mean[idx].to_string(), g.std[idx].to_string()];
                    if let Some(s) = &g.score {
                        rec.push(s[idx].to_string());
                    }
                    rec.push(g.supported[idx].to_string());
                    w.write_record(&rec)?;
                }
            }
            Ok(())
        })
    };
    for g in &land.interactions {
        let (a, b) = (name(g.features.0), name(g.features.1));
        put(format!("interaction_{a}__{b}.csv"), grid_csv(g)?)?;
        put(
            format!("interaction_{a}__{b}.svg"),
            svg_heatmap(&format!("Predicted viability: {a} × {b}"), &a, &b, g, &g.mean).into_bytes(),
        )?;
    }
    if let Some(g) = &land.acquisition {
        let (a, b) = (name(g.features.0), name(g.features.1));
        put("acquisition_landscape.csv".into(), grid_csv(g)?)?;
        let score = g.score.clone().unwrap_or_default();
        put(
            "acquisition_landscape.svg".into(),
            svg_heatmap("Static acquisition score", &a, &b, g, &score).into_bytes(),
        )?;
        put(
            "acquisition_landscape_std.svg".into(),
            svg_heatmap("Calibrated σ", &a, &b, g, &g.std).into_bytes(),
        )?;
    }

    let dash = &report.dashboard;
    put(
        "uncertainty_coverage.csv".into(),
        csv_bytes(|w| {
            w.write_record(["multiplier", "coverage"])?;
            for (m, c) in &dash.coverage_curve {
                w.write_record([m.to_string(), c.to_string()])?;
            }
            Ok(())
        })?,
    )?;
    let (ms, cs): (Vec<f64>, Vec<f64>) = dash.coverage_curve.iter().copied().unzip();
    put(
        "uncertainty_coverage.svg".into(),
        svg_line("Empirical coverage vs multiplier", "multiplier", "coverage", &ms, &cs, None).into_bytes(),
    )?;
    put(
        "uncertainty_error_vs_sigma.csv".into(),
        csv_bytes(|w| {
            w.write_record(["abs_error", "sigma"])?;
            for (e, s) in &dash.error_vs_sigma {
                w.write_record([e.to_string(), s.to_string()])?;
            }
            Ok(())
        })?,
    )?;
    put(
        "uncertainty_bands.csv".into(),
        csv_bytes(|w| {
            w.write_record(["band_lower", "band_upper", "rows", "mean_sigma"])?;
            for b in &dash.bands {
                w.write_record([b.lower.to_string(), b.upper.to_string(), b.rows.to_string(), fmt_opt(b.mean_sigma)])?;
            }
            Ok(())
        })?,
    )?;
    put(
        "uncertainty_bands.svg".into(),
        svg_bars(
            "Mean σ by viability band",
            &dash.bands.iter().map(|b| format!("[{}, {})", b.lower, b.upper)).collect::<Vec<_>>(),
            &dash.bands.iter().map(|b| b.mean_sigma.unwrap_or(0.0)).collect::<Vec<_>>(),
        )
        .into_bytes(),
    )?;
    Ok(written)
}
