#![allow(dead_code)]

use std::path::PathBuf;

use cryoloop::campaign::CampaignConfig;
use cryoloop::ingest::{FeatureColumn, Source, UnitClass};
use cryoloop::optimizer::{AcquisitionConfig, ObservedContext};
use cryoloop::surrogate::{Prediction, Predictor};
use cryoloop::Result;
use nalgebra::DMatrix;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Predictor backed by a closure returning (μ, σ).
pub struct FnModel<F>(pub F);

impl<F: Fn(&[f64]) -> (f64, f64)> Predictor for FnModel<F> {
    fn predict(&self, q: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        Ok(q.row_iter()
            .map(|r| {
                let row: Vec<f64> = r.iter().copied().collect();
                let (mean, std) = (self.0)(&row);
                Prediction { mean, std }
            })
            .collect())
    }
}

pub fn column(id: &str, unit: UnitClass, bound: f64, family: &str) -> FeatureColumn {
    FeatureColumn {
        id: id.into(),
        unit,
        family: family.into(),
        search_bound: bound,
        molecular_weight: if id == "DMSO" { Some(78.13) } else { Some(100.0) },
        density: if id == "DMSO" { Some(1.1004) } else { None },
    }
}

/// Four columns spanning three chemistry families.
pub fn small_columns() -> Vec<FeatureColumn> {
    vec![
        column("DMSO", UnitClass::Molar, 0.7042, "permeating"),
        column("EG", UnitClass::Molar, 2.5, "permeating"),
        column("FBS", UnitClass::Percent, 90.0, "serum"),
        column("trehalose", UnitClass::Molar, 1.0, "sugar"),
    ]
}

pub fn context(rows: &[Vec<f64>], targets: &[f64], sources: &[Source]) -> ObservedContext {
    let d = rows[0].len();
    let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let weights = sources
        .iter()
        .map(|s| match s {
            Source::Literature => 1.0,
            Source::Wetlab => 50.0,
        })
        .collect();
    ObservedContext::new(m, targets.to_vec(), sources.to_vec(), weights, &AcquisitionConfig::default()).unwrap()
}

/// Small, fast settings for pipeline tests.
pub fn quick_config() -> CampaignConfig {
    let mut cfg = CampaignConfig::default();
    cfg.surrogate.restarts = 2;
    cfg.surrogate.max_evals = 120;
    cfg.de.maxiter = 15;
    cfg.de.popsize = 4;
    cfg.candidates.count = 10;
    cfg.candidates.pool_size = 500;
    cfg.explain.permutation_repeats = 2;
    cfg.explain.shap_background = 10;
    cfg.explain.shap_explained = 5;
    cfg.explain.shap_samples = 40;
    cfg.explain.grid.resolution_1d = 20;
    cfg.explain.grid.resolution_2d = 8;
    cfg
}

/// Dense Gaussian elimination with partial pivoting: solves `a · x = b`
/// for every column of `b` and returns `(x, log|det a|)`.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, f64) {
    let n = a.len();
    let mut log_det = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        log_det += a[c][c].abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            for k in 0..b[r].len() {
                b[r][k] -= f * b[c][k];
            }
        }
    }
    let m = b[0].len();
    let mut x = vec![vec![0.0; m]; n];
    for k in 0..m {
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c][k]).sum();
            x[r][k] = (b[r][k] - s) / a[r][r];
        }
    }
    (x, log_det)
}

/// Owned inputs for a randomized slate problem over [`small_columns`].
pub struct SlateProblem {
    pub candidates: Vec<cryoloop::optimizer::Candidate>,
    pub sources: Vec<String>,
    pub context: ObservedContext,
    pub space: cryoloop::optimizer::SearchSpace,
    pub tested: std::collections::BTreeSet<String>,
    pub previous: Option<cryoloop::evaluate::StageReport>,
}

impl SlateProblem {
    pub fn random(seed: u64) -> Self {
        use cryoloop::optimizer::{sample_recipe, Candidate, PoolConfig, SearchMode, SearchSpace};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let space = SearchSpace::new(&small_columns(), &PoolConfig::general()).unwrap();
        let n = rng.random_range(8..40);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| sample_recipe(&mut rng, &space, 4)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let sources: Vec<Source> = (0..n)
            .map(|_| if rng.random_bool(0.3) { Source::Wetlab } else { Source::Literature })
            .collect();
        let ctx = context(&rows, &targets, &sources);
        let n_cand = rng.random_range(1..30);
        let candidates: Vec<Candidate> = (0..n_cand)
            .map(|_| {
                let x = sample_recipe(&mut rng, &space, 4);
                Candidate {
                    mean: rng.random_range(0.0..100.0),
                    std: rng.random_range(0.0..20.0),
                    acquisition: rng.random_range(-10.0..110.0),
                    n_active: space.n_active(&x),
                    pool: space.pool,
                    mode: SearchMode::BayesOpt,
                    seed,
                    signature: space.signature(&x),
                    vector: x,
                }
            })
            .collect();
        let mut tested: std::collections::BTreeSet<String> =
            candidates.iter().filter(|_| rng.random_bool(0.3)).map(|c| c.signature.clone()).collect();
        tested.extend((0..n).filter(|_| rng.random_bool(0.5)).map(|i| space.signature(&rows[i])));
        let previous = rng.random_bool(0.7).then(|| stage_report(
            rng.random_range(0.0..40.0),
            rng.random_range(-15.0..15.0),
            rng.random_range(0.0..1.0),
        ));
        SlateProblem {
            sources: (0..candidates.len()).map(|i| format!("candidates.csv:{i}")).collect(),
            candidates,
            context: ctx,
            space,
            tested,
            previous,
        }
    }

    pub fn inputs(&self, seed: u64) -> cryoloop::batchgen::SlateInputs<'_> {
        cryoloop::batchgen::SlateInputs {
            candidates: &self.candidates,
            candidate_sources: &self.sources,
            context: &self.context,
            space: &self.space,
            previous: self.previous.as_ref(),
            tested: &self.tested,
            seed,
        }
    }
}

pub fn stage_report(rmse: f64, bias: f64, coverage_1s: f64) -> cryoloop::evaluate::StageReport {
    use cryoloop::evaluate::{BatchMetrics, StageReport};
    StageReport {
        stage: 0,
        batch: BatchMetrics {
            n: 20,
            rmse,
            mae: rmse * 0.8,
            mean_signed_residual: bias,
            spearman_rho: None,
            kendall_tau: None,
            mean_sigma: 5.0,
            coverage_1s,
            coverage_2s: coverage_1s.max(0.9),
            hit_rate_50: 0.5,
            hit_rate_70: 0.5,
        },
        prospective_cumulative_r2: None,
        cumulative_rows: 20,
    }
}

/// Check every structural slate property; returns a description of the
/// first violation.
pub fn slate_violation(slate: &cryoloop::batchgen::Slate, p: &SlateProblem) -> Option<String> {
    use cryoloop::batchgen::{dominant_family, Role};
    use std::collections::{BTreeMap, BTreeSet};
    if slate.rows.len() != 20 {
        return Some(format!("{} rows", slate.rows.len()));
    }
    let sigs: BTreeSet<&str> = slate.rows.iter().map(|r| r.signature.as_str()).collect();
    if sigs.len() != 20 {
        return Some("duplicate signatures".into());
    }
    if let Some(r) = slate.rows.iter().find(|r| p.tested.contains(&r.signature)) {
        return Some(format!("tested formulation {} reissued", r.signature));
    }
    for r in &slate.rows {
        if !p.space.is_feasible(&r.vector) || p.space.n_active(&r.vector) == 0 {
            return Some(format!("infeasible row {:?}", r.vector));
        }
        if p.space.signature(&r.vector) != r.signature {
            return Some("stale signature".into());
        }
    }
    let exploit = slate.role_count(Role::Exploit);
    if exploit > slate.decision.count || !(4..=12).contains(&slate.decision.count) {
        return Some(format!("exploit {exploit} vs planned {}", slate.decision.count));
    }
    if slate.role_count(Role::Coverage) < 2 {
        return Some("fewer than 2 coverage probes".into());
    }
    if !slate.padded && exploit != slate.decision.count {
        return Some("exploit shortfall without padding flag".into());
    }
    let mut fam: BTreeMap<String, usize> = BTreeMap::new();
    for r in slate.rows.iter().filter(|r| r.role == Role::Exploit) {
        *fam.entry(dominant_family(&r.vector, &p.space).unwrap_or_default()).or_default() += 1;
    }
    if fam.values().any(|&c| c > 3) {
        return Some(format!("family cap exceeded: {fam:?}"));
    }
    for m in 6..=12 {
        let Some(s) = slate.capacity_subsets.get(&m) else {
            return Some(format!("missing subset {m}"));
        };
        let set: BTreeSet<usize> = s.iter().copied().collect();
        if s.len() != m || set.len() != m || s.iter().any(|&i| i >= 20) {
            return Some(format!("bad subset {m}: {s:?}"));
        }
        let cov = s.iter().filter(|&&i| slate.rows[i].role == Role::Coverage).count();
        if m >= 8 && cov < 2 {
            return Some(format!("subset {m} drops coverage"));
        }
    }
    None
}

/// Fresh project directory holding the literature fixture.
pub fn project(dir: &std::path::Path, cfg: CampaignConfig) -> cryoloop::campaign::Project {
    std::fs::create_dir_all(dir.join("data")).unwrap();
    std::fs::copy(fixture("literature.csv"), dir.join("data/literature.csv")).unwrap();
    cryoloop::campaign::Project::with_config(dir, cfg).unwrap()
}

/// Synthetic ground truth over parsed column names.
pub fn truth(cols: &[(String, f64)]) -> f64 {
    let get = |name: &str| cols.iter().find(|(c, _)| c == name).map_or(0.0, |c| c.1);
    let y = 35.0 + 40.0 * (get("DMSO_M") / 0.7).min(1.0) + 15.0 * get("trehalose_M").min(1.0) + 0.1 * get("FBS_pct")
        - 8.0 * (get("EG_M") - 1.0).powi(2).min(4.0);
    y.clamp(0.0, 100.0)
}

/// Fill every row of a validation template using `f`; returns the path.
pub fn fill_template(
    template: &std::path::Path,
    out: &std::path::Path,
    f: impl Fn(usize, &[(String, f64)]) -> String,
) -> PathBuf {
    let mut rdr = csv::Reader::from_path(template).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let mut w = csv::Writer::from_path(out).unwrap();
    w.write_record(&headers).unwrap();
    let measured = headers.iter().position(|h| h == "measured_viability").unwrap();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        let cols: Vec<(String, f64)> = headers
            .iter()
            .zip(rec.iter())
            .filter(|(h, _)| h.ends_with("_M") || h.ends_with("_pct"))
            .map(|(h, v)| (h.to_string(), v.parse().unwrap_or(0.0)))
            .collect();
        let mut row: Vec<String> = rec.iter().map(String::from).collect();
        row[measured] = f(i, &cols);
        w.write_record(&row).unwrap();
    }
    w.flush().unwrap();
    out.to_path_buf()
}
