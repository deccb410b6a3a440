//! Twenty-row wet-lab slates: an adaptive number of exploitation rows plus
//! local-rank, blind-spot and coverage probes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::StageReport;
use crate::optimizer::{sample_recipe, Candidate, ObservedContext, SearchSpace};
use crate::stats;
use crate::surrogate::{Prediction, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Exploit,
    LocalRank,
    BlindSpot,
    Coverage,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Exploit => "exploit",
            Role::LocalRank => "local_rank",
            Role::BlindSpot => "blind_spot",
            Role::Coverage => "coverage",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlateRow {
    pub vector: Vec<f64>,
    pub role: Role,
    pub mean: f64,
    pub std: f64,
    /// Acquisition score for exploitation rows.
    pub acquisition: Option<f64>,
    /// Candidate file, anchor row, or generator the row came from.
    pub provenance: String,
    pub signature: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub slate_size: usize,
    pub coverage_probes: usize,
    pub default_exploit: usize,
    pub min_exploit: usize,
    pub max_exploit: usize,
    pub good_rmse: f64,
    pub poor_rmse: f64,
    pub small_bias: f64,
    pub good_coverage: f64,
    pub poor_coverage: f64,
    pub count_step: usize,
    pub family_cap: usize,
    pub anchors: usize,
    pub perturbed_ingredients: usize,
    pub shrink: f64,
    pub grow: f64,
    pub coverage_pool_size: usize,
    pub min_capacity: usize,
    pub max_capacity: usize,
    /// Capacity from which every coverage probe is forced into the subset.
    pub coverage_capacity: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            slate_size: 20,
            coverage_probes: 2,
            default_exploit: 8,
            min_exploit: 4,
            max_exploit: 12,
            good_rmse: 10.0,
            poor_rmse: 20.0,
            small_bias: 3.0,
            good_coverage: 0.6,
            poor_coverage: 0.4,
            count_step: 2,
            family_cap: 3,
            anchors: 3,
            perturbed_ingredients: 2,
            shrink: 0.8,
            grow: 1.25,
            coverage_pool_size: 1000,
            min_capacity: 6,
            max_capacity: 12,
            coverage_capacity: 8,
        }
    }
}

pub const BLIND_SPOT_THRESHOLDS: [f64; 5] = [10.0, 8.0, 5.0, 2.0, 0.0];

/// Exploitation count and the metric rules that moved it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitDecision {
    pub count: usize,
    pub rules: Vec<String>,
    pub rmse: Option<f64>,
    pub mean_signed_residual: Option<f64>,
    pub coverage_1s: Option<f64>,
}

/// Exploitation rows for the next slate given the previous completed stage.
pub fn adapt_exploit_count(prev: Option<&StageReport>) -> usize {
    decide_exploit_count(prev, &BatchConfig::default()).count
}

pub fn decide_exploit_count(prev: Option<&StageReport>, cfg: &BatchConfig) -> ExploitDecision {
    let Some(r) = prev else {
        return ExploitDecision {
            count: cfg.default_exploit.clamp(cfg.min_exploit, cfg.max_exploit),
            rules: vec!["no previous stage: default split".into()],
            rmse: None,
            mean_signed_residual: None,
            coverage_1s: None,
        };
    };
    let b = &r.batch;
    let step = cfg.count_step as i64;
    let mut count = cfg.default_exploit as i64;
    let mut rules = Vec::new();
    if b.rmse < cfg.good_rmse {
        count += step;
        rules.push(format!("RMSE {:.2} < {}: +{step}", b.rmse, cfg.good_rmse));
    }
    if b.mean_signed_residual.abs() < cfg.small_bias && b.coverage_1s >= cfg.good_coverage {
        count += step;
        rules.push(format!(
            "|bias| {:.2} < {} and 1σ coverage {:.2} ≥ {}: +{step}",
            b.mean_signed_residual.abs(),
            cfg.small_bias,
            b.coverage_1s,
            cfg.good_coverage
        ));
    }
    if b.rmse > cfg.poor_rmse {
        count -= step;
        rules.push(format!("RMSE {:.2} > {}: −{step}", b.rmse, cfg.poor_rmse));
    }
    if b.coverage_1s < cfg.poor_coverage {
        count -= step;
        rules.push(format!("1σ coverage {:.2} < {}: −{step}", b.coverage_1s, cfg.poor_coverage));
    }
    let clamped = count.clamp(cfg.min_exploit as i64, cfg.max_exploit as i64);
    if clamped != count {
        rules.push(format!("clamped {count} to {clamped}"));
    }
    ExploitDecision {
        count: clamped as usize,
        rules,
        rmse: Some(b.rmse),
        mean_signed_residual: Some(b.mean_signed_residual),
        coverage_1s: Some(b.coverage_1s),
    }
}

/// Family of the ingredient with the largest bounds-normalized amount.
pub fn dominant_family(x: &[f64], space: &SearchSpace) -> Option<String> {
    space
        .normalize(x)
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(j, _)| space.columns[j].family.clone())
}

/// Greedy k-center: repeatedly pick the pool point farthest (by minimum
/// Euclidean distance) from `observed` and the points already picked.
/// Ties go to the lowest pool index.
pub fn greedy_k_center(observed: &[Vec<f64>], pool: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut min_d: Vec<f64> = pool
        .iter()
        .map(|p| {
            observed
                .iter()
                .map(|o| stats::euclidean(o, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut picked = Vec::new();
    let mut used = vec![false; pool.len()];
    for _ in 0..k.min(pool.len()) {
        let mut best: Option<usize> = None;
        for i in 0..pool.len() {
            if used[i] {
                continue;
            }
            if best.map_or(true, |b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        used[b] = true;
        picked.push(b);
        for i in 0..pool.len() {
            min_d[i] = min_d[i].min(stats::euclidean(&pool[i], &pool[b]));
        }
    }
    picked
}

/// Perturbations of `anchor`: each of its `n` largest bounds-normalized
/// ingredients multiplied by `shrink` and `grow`, clipped to the space.
pub fn perturb_anchor(anchor: &[f64], space: &SearchSpace, cfg: &BatchConfig) -> Vec<Vec<f64>> {
    let norm = space.normalize(anchor);
    let mut order: Vec<usize> = (0..anchor.len()).filter(|&j| anchor[j] > 0.0).collect();
    order.sort_by(|&a, &b| norm[b].total_cmp(&norm[a]).then(a.cmp(&b)));
    let mut out = Vec::new();
    for &j in order.iter().take(cfg.perturbed_ingredients) {
        for factor in [cfg.shrink, cfg.grow] {
            let mut x = anchor.to_vec();
            x[j] *= factor;
            space.clean(&mut x);
            out.push(x);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    LocalRank,
    BlindSpot,
    Coverage,
}

/// Probe rows plus the blind-spot threshold used (if any) and warnings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Probes {
    pub rows: Vec<SlateRow>,
    pub threshold: Option<f64>,
    pub warnings: Vec<String>,
}

/// Shared inputs of the probe generators.
pub struct ProbeContext<'a, P: Predictor + ?Sized> {
    pub context: &'a ObservedContext,
    pub model: &'a P,
    pub space: &'a SearchSpace,
    pub config: &'a BatchConfig,
    /// Extra coverage pool entries (e.g. unused candidates).
    pub extra_pool: &'a [Vec<f64>],
}

fn predict_all<P: Predictor + ?Sized>(model: &P, rows: &[Vec<f64>], d: usize) -> Result<Vec<Prediction>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    model.predict(&DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

fn anchored_probes<P: Predictor + ?Sized>(
    pc: &ProbeContext<'_, P>,
    anchors: &[usize],
    role: Role,
    count: usize,
    exclude: &mut BTreeSet<String>,
) -> Result<Vec<SlateRow>> {
    let ctx = pc.context;
    let mut vectors = Vec::new();
    let mut provenance = Vec::new();
    let mut sigs = Vec::new();
    for &a in anchors {
        for x in perturb_anchor(&ctx.row(a), pc.space, pc.config) {
            if vectors.len() == count {
                break;
            }
            if pc.space.n_active(&x) == 0 || !pc.space.is_feasible(&x) {
                continue;
            }
            let sig = pc.space.signature(&x);
            if exclude.insert(sig.clone()) {
                vectors.push(x);
                provenance.push(format!("{role}:anchor_row={a}"));
                sigs.push(sig);
            }
        }
    }
    let preds = predict_all(pc.model, &vectors, pc.space.dim())?;
    Ok(vectors
        .into_iter()
        .zip(preds)
        .zip(provenance.into_iter().zip(sigs))
        .map(|((vector, p), (provenance, signature))| SlateRow {
            vector,
            role,
            mean: p.mean,
            std: p.std,
            acquisition: None,
            provenance,
            signature,
        })
        .collect())
}

/// Generate up to `count` probes of one kind whose signatures are not in
/// `exclude`; emitted signatures are added to `exclude`.
///
/// Local-rank probes perturb the highest-viability rows; blind-spot probes
/// perturb rows the model underpredicts (wet-lab rows when there are any),
/// using the first residual threshold of 10, 8, 5, 2, 0 that admits an
/// anchor. Anchors beyond the first `config.anchors` are used only when the
/// first ones cannot supply `count` distinct probes. Coverage probes come
/// from greedy k-center over a seeded random pool plus `extra_pool`.
pub fn generate_probes<P: Predictor + ?Sized>(
    kind: ProbeKind,
    pc: &ProbeContext<'_, P>,
    count: usize,
    seed: u64,
    exclude: &mut BTreeSet<String>,
) -> Result<Probes> {
    let ctx = pc.context;
    let mut out = Probes::default();
    if count == 0 {
        return Ok(out);
    }
    match kind {
        ProbeKind::LocalRank => {
            let mut order: Vec<usize> = (0..ctx.len()).collect();
            order.sort_by(|&a, &b| ctx.targets[b].total_cmp(&ctx.targets[a]).then(a.cmp(&b)));
            out.rows = anchored_probes(pc, &order, Role::LocalRank, count, exclude)?;
        }
        ProbeKind::BlindSpot => {
            let wet: Vec<usize> = (0..ctx.len())
                .filter(|&i| ctx.sources[i] == crate::ingest::Source::Wetlab)
                .collect();
            let pool: Vec<usize> = if wet.is_empty() { (0..ctx.len()).collect() } else { wet };
            let preds = pc.model.predict(&ctx.rows.select_rows(&pool))?;
            let residual: Vec<(usize, f64)> = pool
                .iter()
                .zip(&preds)
                .map(|(&i, p)| (i, ctx.targets[i] - p.mean))
                .filter(|(_, r)| *r > 0.0)
                .collect();
            let Some(&threshold) = BLIND_SPOT_THRESHOLDS
                .iter()
                .find(|&&t| residual.iter().any(|(_, r)| *r >= t))
            else {
                out.warnings
                    .push("blind-spot probes: no underpredicted row at any threshold".into());
                return Ok(out);
            };
            let mut anchors: Vec<(usize, f64)> = residual.into_iter().filter(|(_, r)| *r >= threshold).collect();
            anchors.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let anchors: Vec<usize> = anchors.into_iter().map(|a| a.0).collect();
            out.threshold = Some(threshold);
            out.rows = anchored_probes(pc, &anchors, Role::BlindSpot, count, exclude)?;
        }
        ProbeKind::Coverage => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool: Vec<Vec<f64>> = Vec::new();
            let mut pool_sigs = BTreeSet::new();
            let generated = (0..pc.config.coverage_pool_size)
                .map(|_| sample_recipe(&mut rng, pc.space, pc.space.max_active.min(6)));
            for x in pc.extra_pool.iter().cloned().chain(generated) {
                if pc.space.n_active(&x) == 0 || !pc.space.is_feasible(&x) {
                    continue;
                }
                let sig = pc.space.signature(&x);
                if !exclude.contains(&sig) && pool_sigs.insert(sig) {
                    pool.push(x);
                }
            }
            let z_pool: Vec<Vec<f64>> = pool.iter().map(|x| ctx.standardize(x)).collect();
            let picked = greedy_k_center(ctx.standardized_rows(), &z_pool, count);
            let vectors: Vec<Vec<f64>> = picked.iter().map(|&i| pool[i].clone()).collect();
            let preds = predict_all(pc.model, &vectors, pc.space.dim())?;
            for (x, p) in vectors.into_iter().zip(preds) {
                let sig = pc.space.signature(&x);
                exclude.insert(sig.clone());
                out.rows.push(SlateRow {
                    vector: x,
                    role: Role::Coverage,
                    mean: p.mean,
                    std: p.std,
                    acquisition: None,
                    provenance: "coverage:greedy_k_center".into(),
                    signature: sig,
                });
            }
        }
    }
    if out.rows.len() < count {
        out.warnings.push(format!(
            "{kind:?} probes: produced {} of {count}",
            out.rows.len()
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slate {
    pub rows: Vec<SlateRow>,
    pub exploit_count: usize,
    pub decision: ExploitDecision,
    /// Capacity → indices into `rows`.
    pub capacity_subsets: BTreeMap<usize, Vec<usize>>,
    /// Set when rows had to be filled with extra coverage probes.
    pub padded: bool,
    pub blind_spot_threshold: Option<f64>,
    pub warnings: Vec<String>,
}

impl Slate {
    pub fn role_count(&self, role: Role) -> usize {
        self.rows.iter().filter(|r| r.role == role).count()
    }
}

/// Inputs of [`build_slate`] besides the model.
pub struct SlateInputs<'a> {
    pub candidates: &'a [Candidate],
    /// Where each candidate came from, parallel to `candidates`.
    pub candidate_sources: &'a [String],
    pub context: &'a ObservedContext,
    pub space: &'a SearchSpace,
    pub previous: Option<&'a StageReport>,
    pub tested: &'a BTreeSet<String>,
    pub seed: u64,
}

/// Assemble the slate. Exploitation rows are the best-acquisition untested
/// candidates under the family cap; the rest are local-rank and blind-spot
/// probes split evenly, plus the coverage probes. Any shortfall is padded
/// with additional coverage probes and flagged.
pub fn build_slate<P: Predictor + ?Sized>(inputs: &SlateInputs<'_>, model: &P, cfg: &BatchConfig) -> Result<Slate> {
    if inputs.candidates.is_empty() {
        return Err(Error::NoCandidates("slate needs at least one candidate".into()));
    }
    if inputs.candidate_sources.len() != inputs.candidates.len() {
        return Err(Error::input("candidate provenance list length differs from candidates"));
    }
    if cfg.slate_size < cfg.coverage_probes + cfg.max_exploit {
        return Err(Error::input("slate size cannot hold the exploitation and coverage rows"));
    }
    let space = inputs.space;
    let decision = decide_exploit_count(inputs.previous, cfg);
    let mut exclude: BTreeSet<String> = inputs.tested.clone();
    let mut warnings = Vec::new();

    let mut order: Vec<usize> = (0..inputs.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        inputs.candidates[b]
            .acquisition
            .total_cmp(&inputs.candidates[a].acquisition)
            .then(a.cmp(&b))
    });
    let mut rows: Vec<SlateRow> = Vec::new();
    let mut families: BTreeMap<String, usize> = BTreeMap::new();
    let mut used = vec![false; inputs.candidates.len()];
    for &i in &order {
        if rows.len() == decision.count {
            break;
        }
        let c = &inputs.candidates[i];
        if c.vector.len() != space.dim() {
            return Err(Error::input("candidate dimension differs from the search space"));
        }
        let sig = space.signature(&c.vector);
        if exclude.contains(&sig) {
            continue;
        }
        let family = dominant_family(&c.vector, space).unwrap_or_default();
        let n = families.entry(family).or_insert(0);
        if *n >= cfg.family_cap {
            continue;
        }
        *n += 1;
        used[i] = true;
        exclude.insert(sig.clone());
        rows.push(SlateRow {
            vector: c.vector.clone(),
            role: Role::Exploit,
            mean: c.mean,
            std: c.std,
            acquisition: Some(c.acquisition),
            provenance: inputs.candidate_sources[i].clone(),
            signature: sig,
        });
    }
    let exploit_count = rows.len();
    if exploit_count < decision.count {
        warnings.push(format!(
            "only {exploit_count} of {} exploitation rows available",
            decision.count
        ));
    }

    let unused: Vec<Vec<f64>> = (0..inputs.candidates.len())
        .filter(|&i| !used[i])
        .map(|i| inputs.candidates[i].vector.clone())
        .collect();
    let pc = ProbeContext {
        context: inputs.context,
        model,
        space,
        config: cfg,
        extra_pool: &unused,
    };
    let explore = cfg.slate_size - cfg.coverage_probes - decision.count;
    let local_n = explore.div_ceil(2);
    let local = generate_probes(ProbeKind::LocalRank, &pc, local_n, inputs.seed, &mut exclude)?;
    let blind_n = explore - local.rows.len();
    let blind = generate_probes(ProbeKind::BlindSpot, &pc, blind_n, inputs.seed, &mut exclude)?;
    warnings.extend(local.warnings);
    warnings.extend(blind.warnings);
    rows.extend(local.rows);
    rows.extend(blind.rows);

    let coverage_n = cfg.slate_size - rows.len();
    let cov = generate_probes(ProbeKind::Coverage, &pc, coverage_n, inputs.seed, &mut exclude)?;
    warnings.extend(cov.warnings);
    rows.extend(cov.rows);
    if rows.len() != cfg.slate_size {
        return Err(Error::NoCandidates(format!(
            "could only assemble {} of {} slate rows",
            rows.len(),
            cfg.slate_size
        )));
    }
    let padded = coverage_n > cfg.coverage_probes;
    if padded {
        warnings.push(format!(
            "slate padded with {} extra coverage probes",
            coverage_n - cfg.coverage_probes
        ));
    }
    let capacity_subsets = capacity_subsets(&rows, decision.count, cfg);
    Ok(Slate {
        rows,
        exploit_count,
        decision,
        capacity_subsets,
        padded,
        blind_spot_threshold: blind.threshold,
        warnings,
    })
}

/// Recommended subsets for each capacity in
/// `[cfg.min_capacity, cfg.max_capacity]`. Exploitation gets
/// `round(m · planned_exploit / slate_size)` rows; the rest follow role
/// priority (local-rank, blind-spot, coverage), with every coverage probe
/// forced in once `m ≥ cfg.coverage_capacity`.
pub fn capacity_subsets(rows: &[SlateRow], planned_exploit: usize, cfg: &BatchConfig) -> BTreeMap<usize, Vec<usize>> {
    let by_role = |role: Role| -> Vec<usize> { (0..rows.len()).filter(|&i| rows[i].role == role).collect() };
    let exploit = by_role(Role::Exploit);
    let coverage = by_role(Role::Coverage);
    let priority: Vec<usize> = [Role::Exploit, Role::LocalRank, Role::BlindSpot, Role::Coverage]
        .into_iter()
        .flat_map(by_role)
        .collect();
    let mut out = BTreeMap::new();
    for m in cfg.min_capacity..=cfg.max_capacity.min(rows.len()) {
        let target = ((m * planned_exploit) as f64 / cfg.slate_size as f64).round() as usize;
        let mut chosen: Vec<usize> = exploit.iter().copied().take(target.min(m)).collect();
        if m >= cfg.coverage_capacity {
            for &c in &coverage {
                if chosen.len() < m && !chosen.contains(&c) {
                    chosen.push(c);
                }
            }
        }
        for &i in priority.iter().filter(|&&i| rows[i].role != Role::Exploit) {
            if chosen.len() == m {
                break;
            }
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        // exploitation rows fill any remaining room
        for &i in &exploit {
            if chosen.len() == m {
                break;
            }
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        chosen.sort_unstable();
        out.insert(m, chosen);
    }
    out
}

fn write_rows<W: Write>(rows: &[(usize, &SlateRow)], space: &SearchSpace, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["slate_row".into()];
    header.extend(space.columns.iter().map(|c| c.name()));
    header.extend(
        ["role", "predicted_mean", "predicted_std", "acquisition", "provenance", "signature"]
            .map(String::from),
    );
    w.write_record(&header)?;
    for (k, r) in rows {
        let mut rec = vec![k.to_string()];
        rec.extend(r.vector.iter().map(|v| v.to_string()));
        rec.push(r.role.to_string());
        rec.push(r.mean.to_string());
        rec.push(r.std.to_string());
        rec.push(r.acquisition.map(|a| a.to_string()).unwrap_or_default());
        rec.push(r.provenance.clone());
        rec.push(r.signature.clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<slate>", e))?;
    Ok(())
}

pub fn write_slate_csv<W: Write>(slate: &Slate, space: &SearchSpace, writer: W) -> Result<()> {
    write_rows(&slate.rows.iter().enumerate().collect::<Vec<_>>(), space, writer)
}

pub fn write_subset_csv<W: Write>(slate: &Slate, capacity: usize, space: &SearchSpace, writer: W) -> Result<()> {
    let idx = slate
        .capacity_subsets
        .get(&capacity)
        .ok_or_else(|| Error::input(format!("no subset for capacity {capacity}")))?;
    write_rows(&idx.iter().map(|&i| (i, &slate.rows[i])).collect::<Vec<_>>(), space, writer)
}

/// Markdown summary of the split decision and role counts.
pub fn summary_markdown(slate: &Slate) -> String {
    let mut s = String::new();
    let d = &slate.decision;
    let _ = writeln!(s, "# Slate summary\n");
    let _ = writeln!(s, "Rows: {}", slate.rows.len());
    let _ = writeln!(s, "Planned exploitation rows: {}", d.count);
    let _ = writeln!(s, "Exploitation rows issued: {}", slate.exploit_count);
    let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    let _ = writeln!(s, "\n## Previous stage\n");
    let _ = writeln!(s, "- RMSE: {}", fmt_opt(d.rmse));
    let _ = writeln!(s, "- Mean signed residual: {}", fmt_opt(d.mean_signed_residual));
    let _ = writeln!(s, "- 1σ coverage: {}", fmt_opt(d.coverage_1s));
    let _ = writeln!(s, "\n## Rules applied\n");
    for r in &d.rules {
        let _ = writeln!(s, "- {r}");
    }
    let _ = writeln!(s, "\n## Roles\n");
    for role in [Role::Exploit, Role::LocalRank, Role::BlindSpot, Role::Coverage] {
        let _ = writeln!(s, "- {role}: {}", slate.role_count(role));
    }
    if let Some(t) = slate.blind_spot_threshold {
        let _ = writeln!(s, "\nBlind-spot residual threshold: {t}");
    }
    if slate.padded {
        let _ = writeln!(s, "\nPadded with extra coverage probes.");
    }
    if !slate.warnings.is_empty() {
        let _ = writeln!(s, "\n## Warnings\n");
        for w in &slate.warnings {
            let _ = writeln!(s, "- {w}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::batch_metrics;

    fn report(y: &[f64], mu: &[f64], sigma: &[f64]) -> StageReport {
        StageReport {
            stage: 1,
            batch: batch_metrics(y, mu, sigma).unwrap(),
            prospective_cumulative_r2: None,
            cumulative_rows: y.len(),
        }
    }

    #[test]
    fn exploit_count_rules() {
        assert_eq!(adapt_exploit_count(None), 8);
        let mut r = report(&[50.0], &[50.0], &[1.0]);
        r.batch.rmse = 6.9;
        r.batch.mean_signed_residual = 1.0;
        r.batch.coverage_1s = 0.7;
        assert_eq!(adapt_exploit_count(Some(&r)), 12);
        r.batch.rmse = 41.2;
        r.batch.coverage_1s = 0.3;
        assert_eq!(adapt_exploit_count(Some(&r)), 4);
    }

    #[test]
    fn k_center_one_dimensional() {
        let picked = greedy_k_center(&[vec![0.0]], &[vec![0.1], vec![0.9]], 1);
        assert_eq!(picked, vec![1]);
        let picked = greedy_k_center(&[vec![0.0]], &[vec![0.1], vec![0.9], vec![0.5]], 2);
        assert_eq!(picked, vec![1, 2]);
    }
}
