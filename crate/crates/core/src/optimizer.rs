//! Candidate generation: constrained random search and differential
//! evolution over a penalized, calibrated UCB score.
//!
//! The acquisition score of a formulation `x` is
//!
//! ```text
//! μ(x) + κ·σ(x)
//!   − 0.35 · max(0, n_active(x) − reference_count)
//!   − 4.0  · [distance to nearest observed row > support radius]
//!   − 5.0  · #{already selected within bounds-normalized distance 0.05}
//! ```
//!
//! with calibrated μ, σ in viability percentage points and κ = 0.5.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{row_signature, FeatureColumn, Source};
use crate::stats;
use crate::surrogate::{Prediction, Predictor, Standardizer};

pub const DMSO_ID: &str = "DMSO";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    General,
    DmsoFree,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::General => "general",
            PoolKind::DmsoFree => "dmso-free",
        })
    }
}

impl FromStr for PoolKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "general" => Ok(PoolKind::General),
            "dmso-free" => Ok(PoolKind::DmsoFree),
            other => Err(Error::input(format!("unknown pool {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Random,
    #[serde(rename = "bo")]
    BayesOpt,
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMode::Random => "random",
            SearchMode::BayesOpt => "bo",
        })
    }
}

impl FromStr for SearchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "random" => Ok(SearchMode::Random),
            "bo" | "bayesopt" | "bayes-opt" => Ok(SearchMode::BayesOpt),
            other => Err(Error::input(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub kind: PoolKind,
    /// DMSO cap in % v/v; converted to the DMSO column's unit by
    /// [`SearchSpace::new`].
    pub dmso_cap_percent: f64,
    pub max_active_ingredients: usize,
}

impl PoolConfig {
    pub fn general() -> Self {
        PoolConfig {
            kind: PoolKind::General,
            dmso_cap_percent: 5.0,
            max_active_ingredients: 10,
        }
    }

    pub fn dmso_free() -> Self {
        PoolConfig {
            kind: PoolKind::DmsoFree,
            dmso_cap_percent: 0.5,
            max_active_ingredients: 10,
        }
    }

    pub fn for_kind(kind: PoolKind) -> Self {
        match kind {
            PoolKind::General => Self::general(),
            PoolKind::DmsoFree => Self::dmso_free(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub kappa: f64,
    pub sparsity_penalty: f64,
    pub support_penalty: f64,
    pub diversity_penalty: f64,
    pub diversity_radius: f64,
    pub support_radius_scale: f64,
    pub support_quantile: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            kappa: 0.5,
            sparsity_penalty: 0.35,
            support_penalty: 4.0,
            diversity_penalty: 5.0,
            diversity_radius: 0.05,
            support_radius_scale: 1.25,
            support_quantile: 0.9,
        }
    }
}

/// Box `[0, upper_j]` per feature, with DMSO capped by the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub columns: Vec<FeatureColumn>,
    pub upper: Vec<f64>,
    pub max_active: usize,
    pub pool: PoolKind,
}

impl SearchSpace {
    pub fn new(columns: &[FeatureColumn], pool: &PoolConfig) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::input("search space needs at least one feature"));
        }
        let upper: Vec<f64> = columns
            .iter()
            .map(|c| {
                if c.id == DMSO_ID {
                    c.from_percent_vv(pool.dmso_cap_percent)
                } else {
                    c.search_bound
                }
            })
            .collect();
        if let Some((c, u)) = columns.iter().zip(&upper).find(|(_, u)| !(**u > 0.0 && u.is_finite())) {
            return Err(Error::input(format!("{}: upper bound {u} must be positive", c.id)));
        }
        Ok(SearchSpace {
            columns: columns.to_vec(),
            upper,
            max_active: pool.max_active_ingredients,
            pool: pool.kind,
        })
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.upper.iter().map(|&u| (0.0, u)).collect()
    }

    pub fn floor(&self, j: usize) -> f64 {
        self.columns[j].unit.trace_floor()
    }

    /// Map into `[0, 1]^d` by the per-feature upper bounds.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.upper).map(|(v, u)| v / u).collect()
    }

    /// Clip to the box and zero sub-floor entries.
    pub fn clean(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(0.0, self.upper[j]);
            if *v < self.floor(j) {
                *v = 0.0;
            }
        }
    }

    pub fn n_active(&self, x: &[f64]) -> usize {
        x.iter()
            .enumerate()
            .filter(|(j, v)| **v >= self.floor(*j))
            .count()
    }

    pub fn is_feasible(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.upper)
                .all(|(v, u)| *v >= 0.0 && *v <= u * (1.0 + 1e-12))
            && self.n_active(x) <= self.max_active
    }

    pub fn signature(&self, x: &[f64]) -> String {
        row_signature(x, &self.columns)
    }

    pub fn dmso_index(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.id == DMSO_ID)
    }
}

/// Observed rows (literature + wet-lab) the search is anchored to.
#[derive(Debug, Clone)]
pub struct ObservedContext {
    pub rows: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub sources: Vec<Source>,
    pub weights: Vec<f64>,
    pub scaler: Standardizer,
    standardized: Vec<Vec<f64>>,
    pub reference_count: f64,
    pub support_radius: f64,
}

impl ObservedContext {
    /// `weights` are per-row source weights. Standardization uses the
    /// context's own (unweighted) column statistics.
    pub fn new(
        rows: DMatrix<f64>,
        targets: Vec<f64>,
        sources: Vec<Source>,
        weights: Vec<f64>,
        cfg: &AcquisitionConfig,
    ) -> Result<Self> {
        let n = rows.nrows();
        if n == 0 {
            return Err(Error::input("observed context is empty"));
        }
        if targets.len() != n || sources.len() != n || weights.len() != n {
            return Err(Error::input("observed context columns have mismatched lengths"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::input("context weights must be ≥ 0"));
        }
        let scaler = Standardizer::fit(&rows);
        let standardized: Vec<Vec<f64>> = rows
            .row_iter()
            .map(|r| scaler.transform_row(&r.iter().copied().collect::<Vec<_>>()))
            .collect();
        let counts: Vec<f64> = rows
            .row_iter()
            .map(|r| r.iter().filter(|v| **v > 0.0).count() as f64)
            .collect();
        let reference_count = stats::weighted_median(&counts, &weights).unwrap_or(0.0);
        let support_radius = support_radius(&standardized, &weights, cfg);
        Ok(ObservedContext {
            rows,
            targets,
            sources,
            weights,
            scaler,
            standardized,
            reference_count,
            support_radius,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        self.scaler.transform_row(x)
    }

    pub fn standardized_rows(&self) -> &[Vec<f64>] {
        &self.standardized
    }

    /// Distance (standardized space) from `x` to the nearest observed row.
    pub fn nearest_distance(&self, x: &[f64]) -> f64 {
        let z = self.standardize(x);
        self.standardized
            .iter()
            .map(|r| stats::euclidean(r, &z))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_supported(&self, x: &[f64]) -> bool {
        self.nearest_distance(x) <= self.support_radius
    }
}

/// Weighted `cfg.support_quantile` of nearest-neighbour distances between
/// standardized rows, times `cfg.support_radius_scale`. With fewer than two
/// rows the radius falls back to `scale · √d`.
pub fn support_radius(standardized: &[Vec<f64>], weights: &[f64], cfg: &AcquisitionConfig) -> f64 {
    let n = standardized.len();
    let d = standardized.first().map_or(1, Vec::len).max(1);
    let fallback = cfg.support_radius_scale * (d as f64).sqrt();
    if n < 2 {
        return fallback;
    }
    let nn: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| stats::euclidean(&standardized[i], &standardized[j]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    match stats::weighted_quantile(&nn, weights, cfg.support_quantile) {
        Some(q) => cfg.support_radius_scale * q,
        None => fallback,
    }
}

/// Individual terms of the acquisition score; penalties are positive
/// amounts that get subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionTerms {
    pub mean: f64,
    pub std: f64,
    pub ucb: f64,
    pub sparsity: f64,
    pub support: f64,
    pub diversity: f64,
}

impl AcquisitionTerms {
    pub fn total(&self) -> f64 {
        self.ucb - self.sparsity - self.support - self.diversity
    }

    /// Score without the batch-diversity term.
    pub fn static_score(&self) -> f64 {
        self.ucb - self.sparsity - self.support
    }
}

/// Score terms for `x` given an already-computed calibrated prediction.
pub fn acquisition_terms(
    pred: Prediction,
    x: &[f64],
    context: &ObservedContext,
    space: &SearchSpace,
    selected: &[Vec<f64>],
    cfg: &AcquisitionConfig,
) -> AcquisitionTerms {
    let extra = space.n_active(x) as f64 - context.reference_count;
    let sparsity = cfg.sparsity_penalty * extra.max(0.0);
    let support = if context.is_supported(x) {
        0.0
    } else {
        cfg.support_penalty
    };
    let diversity = if selected.is_empty() {
        0.0
    } else {
        let xn = space.normalize(x);
        let close = selected
            .iter()
            .filter(|s| stats::euclidean(&space.normalize(s), &xn) <= cfg.diversity_radius)
            .count();
        cfg.diversity_penalty * close as f64
    };
    AcquisitionTerms {
        mean: pred.mean,
        std: pred.std,
        ucb: pred.mean + cfg.kappa * pred.std,
        sparsity,
        support,
        diversity,
    }
}

pub fn acquisition_score<P: Predictor + ?Sized>(
    x: &[f64],
    model: &P,
    context: &ObservedContext,
    space: &SearchSpace,
    selected: &[Vec<f64>],
    cfg: &AcquisitionConfig,
) -> Result<f64> {
    let pred = model.predict_row(x)?;
    Ok(acquisition_terms(pred, x, context, space, selected, cfg).total())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeSettings {
    pub maxiter: usize,
    /// Population size multiplier: the population holds `popsize · dim`
    /// members.
    pub popsize: usize,
    pub seed: u64,
    pub crossover: f64,
    /// Mutation factor dither range `[lo, hi)`, redrawn every generation.
    pub mutation: (f64, f64),
}

impl Default for DeSettings {
    fn default() -> Self {
        DeSettings {
            maxiter: 100,
            popsize: 15,
            seed: 42,
            crossover: 0.7,
            mutation: (0.5, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeResult {
    pub best: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Maximize `objective` over a box with best/1/bin differential evolution.
///
/// The population is Latin-hypercube initialized; trial vectors are clipped
/// to the bounds; replacement is immediate. Non-finite objective values
/// count as −∞. Deterministic for a given seed.
pub fn differential_evolution<F>(mut objective: F, bounds: &[(f64, f64)], settings: &DeSettings) -> Result<DeResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = bounds.len();
    if dim == 0 {
        return Err(Error::input("differential evolution needs at least one dimension"));
    }
    if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::input(format!("invalid bounds [{lo}, {hi}]")));
    }
    let np = (settings.popsize * dim).max(5);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut cost = |x: &[f64]| {
        let v = -objective(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    // Latin hypercube: one stratum per member in every dimension
    let mut pop = vec![vec![0.0; dim]; np];
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..np).collect();
        for i in (1..np).rev() {
            let k = rng.random_range(0..=i);
            strata.swap(i, k);
        }
        for (i, member) in pop.iter_mut().enumerate() {
            let u = (strata[i] as f64 + rng.random::<f64>()) / np as f64;
            member[j] = lo + u * (hi - lo);
        }
    }
    let mut costs: Vec<f64> = pop.iter().map(|m| cost(m)).collect();
    let mut evaluations = np;
    let mut best = (0..np).min_by(|&a, &b| costs[a].total_cmp(&costs[b])).unwrap_or(0);

    let mut trial = vec![0.0; dim];
    for _ in 0..settings.maxiter {
        let (flo, fhi) = settings.mutation;
        let f = if fhi > flo { rng.random_range(flo..fhi) } else { flo };
        for i in 0..np {
            let (r1, r2) = loop {
                let a = rng.random_range(0..np);
                let b = rng.random_range(0..np);
                if a != b && a != i && b != i {
                    break (a, b);
                }
            };
            let jrand = rng.random_range(0..dim);
            for j in 0..dim {
                trial[j] = if j == jrand || rng.random::<f64>() < settings.crossover {
                    pop[best][j] + f * (pop[r1][j] - pop[r2][j])
                } else {
                    pop[i][j]
                };
                trial[j] = trial[j].clamp(bounds[j].0, bounds[j].1);
            }
            let c = cost(&trial);
            evaluations += 1;
            if c <= costs[i] {
                pop[i].copy_from_slice(&trial);
                costs[i] = c;
                if c < costs[best] {
                    best = i;
                }
            }
        }
    }
    Ok(DeResult {
        best: pop[best].clone(),
        value: -costs[best],
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub vector: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub acquisition: f64,
    pub n_active: usize,
    pub pool: PoolKind,
    pub mode: SearchMode,
    pub seed: u64,
    pub signature: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub count: usize,
    pub pool_size: usize,
    /// Largest ingredient count drawn for a random-pool recipe.
    pub max_sampled_ingredients: usize,
    pub seed: u64,
    pub de: DeSettings,
    pub acquisition: AcquisitionConfig,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            count: 20,
            pool_size: 5000,
            max_sampled_ingredients: 6,
            seed: 42,
            de: DeSettings::default(),
            acquisition: AcquisitionConfig::default(),
        }
    }
}

/// One random sparse recipe: `k ~ U{1..max_k}` distinct features, each
/// drawn uniformly in (trace floor, upper bound].
pub fn sample_recipe<R: Rng>(rng: &mut R, space: &SearchSpace, max_k: usize) -> Vec<f64> {
    let d = space.dim();
    let k = rng.random_range(1..=max_k.clamp(1, d));
    let mut x = vec![0.0; d];
    for j in index::sample(rng, d, k) {
        let lo = space.floor(j).min(space.upper[j]);
        let u = 1.0 - rng.random::<f64>();
        x[j] = lo + u * (space.upper[j] - lo);
    }
    space.clean(&mut x);
    x
}

/// Decode a DE point `[gates; values]` into a formulation: feature `j` is
/// present iff its gate is ≥ 0.5, keeping at most `max_active` highest
/// gates.
pub fn decode_gated(u: &[f64], space: &SearchSpace) -> Vec<f64> {
    let d = space.dim();
    let mut on: Vec<usize> = (0..d).filter(|&j| u[j] >= 0.5).collect();
    if on.len() > space.max_active {
        on.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
        on.truncate(space.max_active);
    }
    let mut x = vec![0.0; d];
    for j in on {
        x[j] = u[d + j];
    }
    space.clean(&mut x);
    x
}

fn predict_rows<P: Predictor + ?Sized>(model: &P, rows: &[Vec<f64>], d: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(512) {
        let m = DMatrix::from_fn(chunk.len(), d, |i, j| chunk[i][j]);
        out.extend(model.predict(&m)?);
    }
    Ok(out)
}

/// Generate `opts.count` feasible candidates for one pool.
///
/// Random mode samples `opts.pool_size` sparse recipes and keeps the best
/// calibrated means. Bayes-opt mode runs differential evolution once per
/// candidate, each run penalizing proximity to the candidates already
/// chosen; duplicate signatures are skipped.
pub fn generate_candidates<P: Predictor + ?Sized>(
    model: &P,
    context: &ObservedContext,
    space: &SearchSpace,
    mode: SearchMode,
    opts: &GenerateOptions,
) -> Result<Vec<Candidate>> {
    if context.dim() != space.dim() {
        return Err(Error::input(format!(
            "context has {} features, search space {}",
            context.dim(),
            space.dim()
        )));
    }
    let cfg = &opts.acquisition;
    let d = space.dim();
    let mut out: Vec<Candidate> = Vec::new();
    let mut seen = BTreeSet::new();
    match mode {
        SearchMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut pool = Vec::new();
            let mut rejected = 0usize;
            for _ in 0..opts.pool_size {
                let x = sample_recipe(&mut rng, space, opts.max_sampled_ingredients);
                if !space.is_feasible(&x) || space.n_active(&x) == 0 {
                    rejected += 1;
                    continue;
                }
                if seen.insert(space.signature(&x)) {
                    pool.push(x);
                }
            }
            if pool.is_empty() {
                return Err(Error::NoCandidates(format!(
                    "random pool of {} produced no feasible recipe ({rejected} rejected)",
                    opts.pool_size
                )));
            }
            let preds = predict_rows(model, &pool, d)?;
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.sort_by(|&a, &b| preds[b].mean.total_cmp(&preds[a].mean).then(a.cmp(&b)));
            for &i in order.iter().take(opts.count) {
                let x = &pool[i];
                let t = acquisition_terms(preds[i], x, context, space, &[], cfg);
                out.push(Candidate {
                    vector: x.clone(),
                    mean: preds[i].mean,
                    std: preds[i].std,
                    acquisition: t.total(),
                    n_active: space.n_active(x),
                    pool: space.pool,
                    mode,
                    seed: opts.seed,
                    signature: space.signature(x),
                });
            }
        }
        SearchMode::BayesOpt => {
            let mut bounds = vec![(0.0, 1.0); d];
            bounds.extend(space.bounds());
            let mut selected: Vec<Vec<f64>> = Vec::new();
            let max_runs = opts.count.saturating_mul(3).max(1);
            for run in 0..max_runs {
                if out.len() >= opts.count {
                    break;
                }
                let settings = DeSettings {
                    seed: opts.de.seed.wrapping_add(opts.seed).wrapping_add(run as u64),
                    ..opts.de
                };
                let objective = |u: &[f64]| {
                    let x = decode_gated(u, space);
                    match model.predict_row(&x) {
                        Ok(p) => acquisition_terms(p, &x, context, space, &selected, cfg).total(),
                        Err(_) => f64::NEG_INFINITY,
                    }
                };
                let res = differential_evolution(objective, &bounds, &settings)?;
                let x = decode_gated(&res.best, space);
                let sig = space.signature(&x);
                if space.n_active(&x) == 0 || !seen.insert(sig.clone()) {
                    continue;
                }
                let p = model.predict_row(&x)?;
                let t = acquisition_terms(p, &x, context, space, &selected, cfg);
                out.push(Candidate {
                    vector: x.clone(),
                    mean: p.mean,
                    std: p.std,
                    acquisition: t.total(),
                    n_active: space.n_active(&x),
                    pool: space.pool,
                    mode,
                    seed: settings.seed,
                    signature: sig,
                });
                selected.push(x);
            }
            if out.is_empty() {
                return Err(Error::NoCandidates(format!(
                    "{max_runs} differential-evolution runs found no distinct feasible formulation"
                )));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::UnitClass;

    struct Fixed(Prediction);
    impl Predictor for Fixed {
        fn predict(&self, q: &DMatrix<f64>) -> Result<Vec<Prediction>> {
            Ok(vec![self.0; q.nrows()])
        }
    }

    fn col(id: &str, unit: UnitClass, bound: f64) -> FeatureColumn {
        FeatureColumn {
            id: id.into(),
            unit,
            family: "x".into(),
            search_bound: bound,
            molecular_weight: Some(78.13),
            density: Some(1.1004),
        }
    }

    fn space() -> SearchSpace {
        SearchSpace::new(
            &[
                col("DMSO", UnitClass::Molar, 1.0),
                col("EG", UnitClass::Molar, 2.5),
                col("FBS", UnitClass::Percent, 90.0),
            ],
            &PoolConfig::general(),
        )
        .unwrap()
    }

    fn context(rows: &[[f64; 3]]) -> ObservedContext {
        let m = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
        ObservedContext::new(
            m,
            vec![50.0; rows.len()],
            vec![Source::Literature; rows.len()],
            vec![1.0; rows.len()],
            &AcquisitionConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn dmso_caps_convert_to_molar() {
        let s = space();
        assert!((s.upper[0] - 0.05 * 1100.4 / 78.13).abs() < 1e-12);
        let f = SearchSpace::new(&s.columns, &PoolConfig::dmso_free()).unwrap();
        assert!((f.upper[0] - 0.005 * 1100.4 / 78.13).abs() < 1e-12);
    }

    #[test]
    fn radius_examples() {
        let cfg = AcquisitionConfig::default();
        let two = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert!((support_radius(&two, &[1.0, 1.0], &cfg) - 6.25).abs() < 1e-12);
        let one = vec![vec![0.0; 4]];
        assert!((support_radius(&one, &[1.0], &cfg) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn acquisition_examples() {
        let s = space();
        let ctx = context(&[[0.3, 1.0, 10.0], [0.2, 1.2, 10.0], [0.25, 0.9, 20.0]]);
        let model = Fixed(Prediction { mean: 70.0, std: 10.0 });
        let cfg = AcquisitionConfig::default();
        let x = ctx.row(0);
        // x has 3 active ingredients, reference count 3
        assert_eq!(ctx.reference_count, 3.0);
        let base = acquisition_score(&x, &model, &ctx, &s, &[], &cfg).unwrap();
        assert!((base - 75.0).abs() < 1e-12);

        let far = [0.7, 2.5, 90.0];
        assert!(!ctx.is_supported(&far));
        let v = acquisition_score(&far, &model, &ctx, &s, &[], &cfg).unwrap();
        assert!((v - 71.0).abs() < 1e-12);

        let near = vec![x[0] + 0.001, x[1], x[2]];
        let v = acquisition_score(&x, &model, &ctx, &s, &[near.clone()], &cfg).unwrap();
        assert!((v - 70.0).abs() < 1e-12);
        let v = acquisition_score(&x, &model, &ctx, &s, &[near.clone(), near], &cfg).unwrap();
        assert!((v - 65.0).abs() < 1e-12);
    }

    #[test]
    fn sparsity_is_per_extra_ingredient() {
        let s = space();
        let ctx = context(&[[0.3, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 10.0]]);
        assert_eq!(ctx.reference_count, 1.0);
        let t = acquisition_terms(
            Prediction { mean: 0.0, std: 0.0 },
            &[0.3, 1.0, 10.0],
            &ctx,
            &s,
            &[],
            &AcquisitionConfig::default(),
        );
        assert!((t.sparsity - 0.70).abs() < 1e-12);
    }

    #[test]
    fn de_sphere_and_determinism() {
        let sphere = |x: &[f64]| -x.iter().map(|v| v * v).sum::<f64>();
        let bounds = vec![(-5.0, 5.0); 3];
        let a = differential_evolution(sphere, &bounds, &DeSettings::default()).unwrap();
        assert!(a.best.iter().all(|v| v.abs() < 1e-2), "{:?}", a.best);
        let b = differential_evolution(sphere, &bounds, &DeSettings::default()).unwrap();
        assert_eq!(a, b);
        assert!(differential_evolution(sphere, &[(1.0, 1.0)], &DeSettings::default()).is_err());
    }

    #[test]
    fn de_stays_in_bounds() {
        // optimum outside the box: the answer must sit on the boundary
        let f = |x: &[f64]| x[0] + x[1];
        let r = differential_evolution(f, &[(0.0, 1.0), (-2.0, -1.0)], &DeSettings::default()).unwrap();
        assert!(r.best[0] <= 1.0 && r.best[1] <= -1.0 && r.best[1] >= -2.0);
        assert!((r.value - 0.0).abs() < 1e-6);
    }

    #[test]
    fn gated_decoding_limits_active_count() {
        let cols: Vec<FeatureColumn> = (0..12)
            .map(|i| col(&format!("f{i:02}"), UnitClass::Molar, 1.0))
            .collect();
        let s = SearchSpace::new(&cols, &PoolConfig::general()).unwrap();
        let mut u = vec![0.9; 12];
        u.extend(vec![0.5; 12]);
        u[3] = 0.1;
        let x = decode_gated(&u, &s);
        assert_eq!(s.n_active(&x), 10);
        assert_eq!(x[3], 0.0);
    }

    #[test]
    fn random_candidates_respect_pool() {
        let s = SearchSpace::new(&space().columns, &PoolConfig::dmso_free()).unwrap();
        let ctx = context(&[[0.3, 1.0, 10.0], [0.2, 1.2, 10.0], [0.25, 0.9, 20.0]]);
        let model = Fixed(Prediction { mean: 50.0, std: 1.0 });
        let opts = GenerateOptions {
            pool_size: 300,
            ..Default::default()
        };
        let c = generate_candidates(&model, &ctx, &s, SearchMode::Random, &opts).unwrap();
        assert_eq!(c.len(), 20);
        for cand in &c {
            assert!(cand.vector[0] <= s.upper[0] + 1e-12);
            assert!(cand.n_active <= 10 && cand.n_active >= 1);
        }
    }
}
