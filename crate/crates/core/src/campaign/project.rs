use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingRows, CHECKPOINT_FORMAT};
use super::config::CampaignConfig;
use super::write_atomic;
use crate::batchgen::{self, Slate, SlateInputs};
use crate::composite::{fit_calibrated, Samples};
use crate::error::{Error, Result};
use crate::evaluate::{self, IssuedSignatures, StageReport};
use crate::explain::{self, ExplainReport};
use crate::ingest::{
    build_dataset, read_parsed_csv, read_records_csv, split_column_name, write_dataset_csv,
    write_observations_csv, Dataset, FeatureColumn, FormulationVector, Observation, Registry, Source,
};
use crate::optimizer::{generate_candidates, Candidate, GenerateOptions, PoolKind, SearchMode, SearchSpace};

const CONFIG_FILE: &str = "cryoloop.toml";

fn stage_seed(base: u64, stage: u32, salt: u64) -> u64 {
    base.wrapping_add((stage as u64).wrapping_mul(1_000_003)).wrapping_add(salt)
}

fn pool_salt(pool: PoolKind, mode: SearchMode) -> u64 {
    let p = match pool {
        PoolKind::General => 10,
        PoolKind::DmsoFree => 20,
    };
    p + match mode {
        SearchMode::Random => 0,
        SearchMode::BayesOpt => 1,
    }
}

fn csv_to_bytes<F>(f: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub records: usize,
    pub rejected: usize,
    pub warnings: usize,
    pub unique_formulations: usize,
    pub features: usize,
    pub active_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UpdateOutcome {
    Created { stage: u32 },
    UpToDate { stage: u32 },
}

impl UpdateOutcome {
    pub fn stage(&self) -> u32 {
        match self {
            UpdateOutcome::Created { stage } | UpdateOutcome::UpToDate { stage } => *stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: Vec<String>,
    pub warnings: Vec<String>,
    pub skipped_blank: usize,
    pub update: Option<UpdateOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: String,
    pub ok: bool,
    pub artifacts: Vec<String>,
    pub message: Option<String>,
}

/// What one `run-stage` produced; written even when a step fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Option<u32>,
    pub seed: u64,
    pub complete: bool,
    pub steps: Vec<StepRecord>,
}

/// A campaign rooted at a project directory.
#[derive(Debug, Clone)]
pub struct Project {
    pub root: PathBuf,
    pub config: CampaignConfig,
    pub registry: Registry,
}

impl Project {
    /// Open `root`, reading `config` (or `root/cryoloop.toml` when present).
    /// `seed` overrides the configured seed.
    pub fn open(root: impl Into<PathBuf>, config: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let root = root.into();
        let default_cfg = root.join(CONFIG_FILE);
        let mut cfg = match config {
            Some(p) => CampaignConfig::load(p)?,
            None if default_cfg.is_file() => CampaignConfig::load(&default_cfg)?,
            None => CampaignConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Self::with_config(root, cfg)
    }

    pub fn with_config(root: impl Into<PathBuf>, config: CampaignConfig) -> Result<Self> {
        let root = root.into();
        config.validate()?;
        let registry = match &config.data.registry {
            Some(p) => Registry::from_path(root.join(p))?,
            None => Registry::builtin(),
        };
        Ok(Project { root, config, registry })
    }

    pub fn stage_dir(&self, stage: u32) -> PathBuf {
        self.root.join(format!("stage_{stage}"))
    }

    pub fn checkpoint_path(&self, stage: u32) -> PathBuf {
        self.stage_dir(stage).join("checkpoint.json")
    }

    pub fn parsed_path(&self) -> PathBuf {
        self.root.join("data/parsed.csv")
    }

    pub fn wetlab_path(&self) -> PathBuf {
        self.root.join("data/wetlab.csv")
    }

    pub fn evaluation_dir(&self) -> PathBuf {
        self.root.join("evaluation")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }

    /// Stages that have a checkpoint, ascending.
    pub fn stages(&self) -> Vec<u32> {
        let mut out: Vec<u32> = std::fs::read_dir(&self.root)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().to_string();
                let k: u32 = name.strip_prefix("stage_")?.parse().ok()?;
                self.checkpoint_path(k).is_file().then_some(k)
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn latest_stage(&self) -> Option<u32> {
        self.stages().last().copied()
    }

    pub fn load_stage(&self, stage: u32) -> Result<Checkpoint> {
        load_checkpoint(&self.checkpoint_path(stage))
    }

    pub fn latest_checkpoint(&self) -> Result<Checkpoint> {
        let k = self
            .latest_stage()
            .ok_or_else(|| Error::Checkpoint("no checkpoint yet; run `train` first".into()))?;
        self.load_stage(k)
    }

    // ---- data --------------------------------------------------------------

    /// Parse the raw literature records into `data/parsed.csv` and
    /// `data/parse_report.csv`.
    pub fn parse(&self, input: Option<&Path>) -> Result<(ParseSummary, Vec<PathBuf>)> {
        let path = input.map_or_else(|| self.root.join(&self.config.data.literature), Path::to_path_buf);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let report = read_records_csv(file, &self.registry)?;
        let records: Vec<Observation> = report
            .observations
            .iter()
            .filter(|o| o.source == Source::Literature)
            .cloned()
            .collect();
        let dropped = report.observations.len() - records.len();
        let dataset = build_dataset(&records, &self.registry)?;
        let mut written = Vec::new();
        let out = self.parsed_path();
        write_atomic(&out, &csv_to_bytes(|b| write_dataset_csv(&dataset, b))?)?;
        written.push(out);
        let report_path = self.root.join("data/parse_report.csv");
        let bytes = csv_to_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["record_id", "kind", "message"])?;
            for (id, warn) in &report.warnings {
                w.write_record([id.as_str(), "warning", &format!("{}: {}", warn.clause, warn.message)])?;
            }
            for r in &report.rejected {
                w.write_record([r.record_id.as_str(), "rejected", r.reason.as_str()])?;
            }
            if dropped > 0 {
                w.write_record(["", "warning", &format!("{dropped} non-literature records ignored")])?;
            }
            w.flush().map_err(|e| Error::io("<parse report>", e))?;
            Ok(())
        })?;
        write_atomic(&report_path, &bytes)?;
        written.push(report_path);
        Ok((
            ParseSummary {
                records: report.observations.len() + report.rejected.len(),
                rejected: report.rejected.len(),
                warnings: report.warnings.len(),
                unique_formulations: dataset.len(),
                features: dataset.columns.len(),
                active_features: dataset.active_mask.iter().filter(|m| **m).count(),
            },
            written,
        ))
    }

    /// Literature observations from the parsed file, parsing the raw records
    /// in memory when no parsed file exists yet.
    pub fn literature(&self) -> Result<Vec<Observation>> {
        let parsed = self.parsed_path();
        if parsed.is_file() {
            let f = std::fs::File::open(&parsed).map_err(|e| Error::io(&parsed, e))?;
            return Ok(read_parsed_csv(f)?
                .into_iter()
                .filter(|o| o.source == Source::Literature)
                .collect());
        }
        let raw = self.root.join(&self.config.data.literature);
        if !raw.is_file() {
            return Err(Error::input(format!(
                "no literature data: expected {} or {}",
                self.rel(&parsed),
                self.rel(&raw)
            )));
        }
        let f = std::fs::File::open(&raw).map_err(|e| Error::io(&raw, e))?;
        Ok(read_records_csv(f, &self.registry)?
            .observations
            .into_iter()
            .filter(|o| o.source == Source::Literature)
            .collect())
    }

    pub fn wetlab(&self) -> Result<Vec<Observation>> {
        let p = self.wetlab_path();
        if !p.is_file() {
            return Ok(Vec::new());
        }
        let f = std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        let mut obs = read_parsed_csv(f)?;
        for o in &mut obs {
            o.source = Source::Wetlab;
        }
        Ok(obs)
    }

    fn training_dataset(&self, wet: &[Observation]) -> Result<Dataset> {
        let mut records = self.literature()?;
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        records.extend(wet.iter().cloned());
        build_dataset(&records, &self.registry)
    }

    // ---- fitting -----------------------------------------------------------

    fn fit_stage(&self, stage: u32, wet: &[Observation], tested: BTreeSet<String>) -> Result<Checkpoint> {
        let cfg = &self.config;
        let dataset = self.training_dataset(wet)?;
        let columns = dataset.active_columns();
        if columns.is_empty() {
            return Err(Error::input("no feature reaches the literature support threshold"));
        }
        let x = dataset.matrix_for(&columns);
        let lit_rows = dataset.rows_with_source(Source::Literature);
        let wet_rows = dataset.rows_with_source(Source::Wetlab);
        let take = |rows: &[usize]| -> Result<Samples> {
            Samples::new(x.select_rows(rows), rows.iter().map(|&i| dataset.targets[i]).collect())
        };
        let opts = cfg.fit_options(stage_seed(cfg.seed, stage, 0));
        let (model, _) = fit_calibrated(&take(&lit_rows)?, &take(&wet_rows)?, cfg.noise, &opts)?;
        let order: Vec<usize> = lit_rows.iter().chain(&wet_rows).copied().collect();
        let mut tested = tested;
        tested.extend(wet.iter().map(|o| o.vector.signature()));
        Ok(Checkpoint {
            format_version: CHECKPOINT_FORMAT.to_string(),
            stage,
            generator: format!("cryoloop {}", env!("CARGO_PKG_VERSION")),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            columns: columns.clone(),
            model,
            training: TrainingRows {
                x: order.iter().map(|&i| x.row(i).iter().copied().collect()).collect(),
                y: order.iter().map(|&i| dataset.targets[i]).collect(),
                sources: order.iter().map(|&i| dataset.sources[i]).collect(),
            },
            wetlab_observations: wet.len(),
            tested_signatures: tested,
            pools: vec![cfg.pool(PoolKind::General), cfg.pool(PoolKind::DmsoFree)],
            acquisition: cfg.acquisition,
            seed: cfg.seed,
        })
    }

    /// Fit the literature-only stage-0 checkpoint. An existing stage-0
    /// checkpoint is kept unless `force` is set and no later stage exists.
    pub fn train(&self, force: bool) -> Result<UpdateOutcome> {
        let path = self.checkpoint_path(0);
        if path.is_file() {
            if !force {
                return Ok(UpdateOutcome::UpToDate { stage: 0 });
            }
            if self.latest_stage().is_some_and(|k| k > 0) {
                return Err(Error::Checkpoint(
                    "stage 0 cannot be refit once later stages exist".into(),
                ));
            }
        }
        let ckpt = self.fit_stage(0, &[], BTreeSet::new())?;
        save_checkpoint(&ckpt, &path)?;
        Ok(UpdateOutcome::Created { stage: 0 })
    }

    /// Refit on literature plus every wet-lab row measured so far, writing a
    /// new checkpoint for the next stage. Existing checkpoints are never
    /// rewritten; with no new measurements this is a no-op.
    pub fn update(&self) -> Result<UpdateOutcome> {
        let Some(latest) = self.latest_stage() else {
            return self.train(false);
        };
        let prev = self.load_stage(latest)?;
        let wet: Vec<Observation> = self.wetlab()?.into_iter().filter(|o| o.stage <= latest).collect();
        if wet.len() == prev.wetlab_observations {
            return Ok(UpdateOutcome::UpToDate { stage: latest });
        }
        let next = latest + 1;
        let ckpt = self.fit_stage(next, &wet, prev.tested_signatures.clone())?;
        save_checkpoint(&ckpt, &self.checkpoint_path(next))?;
        Ok(UpdateOutcome::Created { stage: next })
    }

    // ---- candidates --------------------------------------------------------

    fn candidate_path(&self, stage: u32, pool: PoolKind, mode: SearchMode) -> PathBuf {
        let pool = match pool {
            PoolKind::General => "general",
            PoolKind::DmsoFree => "dmso_free",
        };
        self.stage_dir(stage).join(format!("candidates_{pool}_{mode}.csv"))
    }

    pub fn space(&self, ckpt: &Checkpoint, pool: PoolKind) -> Result<SearchSpace> {
        SearchSpace::new(&ckpt.columns, &self.config.pool(pool))
    }

    pub fn generate(&self, ckpt: &Checkpoint, pool: PoolKind, mode: SearchMode, count: Option<usize>) -> Result<Vec<Candidate>> {
        let cfg = &self.config;
        let space = self.space(ckpt, pool)?;
        let context = ckpt.context()?;
        let seed = stage_seed(cfg.seed, ckpt.stage, pool_salt(pool, mode));
        let opts = GenerateOptions {
            count: count.unwrap_or(cfg.candidates.count),
            pool_size: cfg.candidates.pool_size,
            max_sampled_ingredients: cfg.candidates.max_sampled_ingredients,
            seed,
            de: crate::optimizer::DeSettings { seed: 0, ..cfg.de },
            acquisition: cfg.acquisition,
        };
        generate_candidates(&ckpt.model, &context, &space, mode, &opts)
    }

    /// Generate and write one candidate table for the latest stage.
    pub fn candidates(&self, pool: PoolKind, mode: SearchMode, count: Option<usize>) -> Result<PathBuf> {
        let ckpt = self.latest_checkpoint()?;
        let cands = self.generate(&ckpt, pool, mode, count)?;
        let path = self.candidate_path(ckpt.stage, pool, mode);
        write_atomic(&path, &candidates_csv(&cands, &ckpt.columns)?)?;
        write_atomic(&path.with_extension("txt"), candidates_summary(&cands, &ckpt.columns).as_bytes())?;
        Ok(path)
    }

    // ---- slates ------------------------------------------------------------

    /// Batch metrics of the previous completed stage, used to size the
    /// exploitation share.
    pub fn previous_report(&self, stage: u32) -> Result<Option<StageReport>> {
        if stage == 0 {
            return Ok(None);
        }
        let prev = stage - 1;
        if !self.checkpoint_path(prev).is_file() {
            return Ok(None);
        }
        let ckpt = self.load_stage(prev)?;
        let wet: Vec<Observation> = self.wetlab()?.into_iter().filter(|o| o.stage <= prev).collect();
        if !wet.iter().any(|o| o.stage == prev) {
            return Ok(None);
        }
        let (x, y, stages) = wet_matrix(&wet, &ckpt.columns);
        evaluate::evaluate_stage(prev, &ckpt.model, &x, &y, &stages).map(Some)
    }

    /// Build the stage slate from the stage's Bayes-opt candidate tables
    /// (generated when missing), and write the slate, capacity subsets,
    /// summary and validation template.
    pub fn next_batch(&self, capacity: Option<usize>) -> Result<Vec<PathBuf>> {
        let ckpt = self.latest_checkpoint()?;
        let stage = ckpt.stage;
        let mut candidates = Vec::new();
        let mut sources = Vec::new();
        let mut written = Vec::new();
        for pool in [PoolKind::General, PoolKind::DmsoFree] {
            let path = self.candidate_path(stage, pool, SearchMode::BayesOpt);
            let cands = if path.is_file() {
                read_candidates_csv(&path, &ckpt.columns, pool)?
            } else {
                let c = self.generate(&ckpt, pool, SearchMode::BayesOpt, None)?;
                write_atomic(&path, &candidates_csv(&c, &ckpt.columns)?)?;
                written.push(path.clone());
                c
            };
            let label = self.rel(&path);
            sources.extend(std::iter::repeat(label).take(cands.len()));
            candidates.extend(cands);
        }
        let space = self.space(&ckpt, PoolKind::General)?;
        let context = ckpt.context()?;
        let previous = self.previous_report(stage)?;
        let inputs = SlateInputs {
            candidates: &candidates,
            candidate_sources: &sources,
            context: &context,
            space: &space,
            previous: previous.as_ref(),
            tested: &ckpt.tested_signatures,
            seed: stage_seed(self.config.seed, stage, 30),
        };
        let slate = batchgen::build_slate(&inputs, &ckpt.model, &self.config.batch)?;
        written.extend(self.write_slate(&slate, &space, stage, capacity)?);
        Ok(written)
    }

    fn write_slate(&self, slate: &Slate, space: &SearchSpace, stage: u32, capacity: Option<usize>) -> Result<Vec<PathBuf>> {
        let dir = self.stage_dir(stage);
        let mut written = Vec::new();
        let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(name);
            write_atomic(&p, &bytes)?;
            written.push(p);
            Ok(())
        };
        put("slate.csv".into(), csv_to_bytes(|b| batchgen::write_slate_csv(slate, space, b))?)?;
        for &m in slate.capacity_subsets.keys() {
            put(
                format!("slate_capacity_{m}.csv"),
                csv_to_bytes(|b| batchgen::write_subset_csv(slate, m, space, b))?,
            )?;
        }
        put("slate_summary.md".into(), batchgen::summary_markdown(slate).into_bytes())?;
        let all: Vec<usize> = (0..slate.rows.len()).collect();
        put("validation_template.csv".into(), template_csv(slate, &all, space, stage)?)?;
        if let Some(m) = capacity {
            let idx = slate
                .capacity_subsets
                .get(&m)
                .ok_or_else(|| Error::input(format!("capacity {m} outside the supported subset sizes")))?;
            put(format!("validation_template_capacity_{m}.csv"), template_csv(slate, idx, space, stage)?)?;
        }
        Ok(written)
    }

    // ---- ingestion ---------------------------------------------------------

    fn issued_signatures(&self) -> Result<Vec<IssuedSignatures>> {
        let mut out = Vec::new();
        for stage in self.stages() {
            let dir = self.stage_dir(stage);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .flatten()
                .map(|e| e.path())
                .filter(|p| {
                    let n = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    n == "slate.csv" || (n.starts_with("candidates_") && n.ends_with(".csv"))
                })
                .collect();
            // the slate first, so a slate match wins within its stage
            files.sort_by_key(|p| (!p.ends_with("slate.csv"), p.clone()));
            for f in files {
                out.push(IssuedSignatures {
                    stage,
                    file: self.rel(&f),
                    signatures: read_signature_column(&f)?,
                });
            }
        }
        Ok(out)
    }

    /// Append measured rows of a filled validation template to the wet-lab
    /// data and refit. Rows with a blank measurement are skipped; rows out of
    /// range or measured twice at the same stage are rejected.
    pub fn ingest(&self, filled: &Path) -> Result<IngestSummary> {
        let latest = self
            .latest_stage()
            .ok_or_else(|| Error::Checkpoint("no checkpoint yet; run `train` first".into()))?;
        let file = std::fs::File::open(filled).map_err(|e| Error::io(filled, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = rdr.headers()?.clone();
        let find = |n: &str| headers.iter().position(|h| h == n);
        let measured = find("measured_viability")
            .ok_or_else(|| Error::input("template lacks a measured_viability column"))?;
        let stage_col = find("stage");
        let row_col = find("slate_row");
        let features: Vec<(usize, String, crate::ingest::UnitClass)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| split_column_name(h).map(|(id, u)| (i, id.to_string(), u)))
            .collect();
        if features.is_empty() {
            return Err(Error::input("template has no feature columns"));
        }

        let mut existing = self.wetlab()?;
        let mut seen: BTreeSet<(String, u32)> =
            existing.iter().map(|o| (o.vector.signature(), o.stage)).collect();
        let issued: BTreeSet<String> = self
            .issued_signatures()?
            .into_iter()
            .flat_map(|s| s.signatures)
            .collect();
        let tag = filled.file_stem().and_then(|s| s.to_str()).unwrap_or("template").to_string();
        let mut summary = IngestSummary {
            accepted: 0,
            rejected: Vec::new(),
            warnings: Vec::new(),
            skipped_blank: 0,
            update: None,
        };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let label = row_col
                .and_then(|i| rec.get(i))
                .map_or_else(|| format!("line {}", line + 2), |r| format!("slate row {r}"));
            let text = rec.get(measured).unwrap_or("").trim();
            if text.is_empty() {
                summary.skipped_blank += 1;
                continue;
            }
            let Ok(viability) = text.trim_end_matches('%').parse::<f64>() else {
                summary.rejected.push(format!("{label}: unreadable viability {text:?}"));
                continue;
            };
            if !(0.0..=100.0).contains(&viability) {
                summary.rejected.push(format!("{label}: viability {viability} outside [0, 100]"));
                continue;
            }
            let stage = match stage_col.and_then(|i| rec.get(i)).filter(|s| !s.is_empty()) {
                Some(s) => match s.parse::<u32>() {
                    Ok(k) => k,
                    Err(_) => {
                        summary.rejected.push(format!("{label}: bad stage {s:?}"));
                        continue;
                    }
                },
                None => latest,
            };
            if stage > latest {
                summary
                    .rejected
                    .push(format!("{label}: stage {stage} has no checkpoint (latest is {latest})"));
                continue;
            }
            let mut vector = FormulationVector::new();
            let mut bad = None;
            for (i, id, unit) in &features {
                let s = rec.get(*i).unwrap_or("").trim();
                let v = if s.is_empty() { Ok(0.0) } else { s.parse::<f64>() };
                match v {
                    Ok(v) if v >= 0.0 && v.is_finite() => vector.add(id.clone(), v, *unit),
                    _ => bad = Some(format!("{label}: bad concentration {s:?} for {id}")),
                }
            }
            if let Some(msg) = bad {
                summary.rejected.push(msg);
                continue;
            }
            let sig = vector.signature();
            if !seen.insert((sig.clone(), stage)) {
                summary
                    .rejected
                    .push(format!("{label}: formulation already measured at stage {stage}"));
                continue;
            }
            if !issued.contains(&sig) {
                summary
                    .warnings
                    .push(format!("{label}: formulation was not issued by any stage (unmatched provenance)"));
            }
            let mut obs = Observation::new(vector, viability, Source::Wetlab)?;
            obs.stage = stage;
            obs.provenance_id = format!("{tag}:{label}");
            existing.push(obs);
            summary.accepted += 1;
        }
        if summary.accepted > 0 {
            let bytes = csv_to_bytes(|b| write_observations_csv(&existing, b))?;
            write_atomic(&self.wetlab_path(), &bytes)?;
            summary.update = Some(self.update()?);
        }
        Ok(summary)
    }

    // ---- evaluation --------------------------------------------------------

    /// Frozen-checkpoint metrics for every stage with measurements, the
    /// cumulative R² series and the signature attribution table.
    pub fn evaluate(&self) -> Result<(Vec<StageReport>, Vec<PathBuf>)> {
        let wet = self.wetlab()?;
        let stages = self.stages();
        let mut reports = Vec::new();
        let mut checkpoints: BTreeMap<u32, Checkpoint> = BTreeMap::new();
        for &k in &stages {
            checkpoints.insert(k, self.load_stage(k)?);
        }
        let mut cumulative = Vec::new();
        for (&k, ckpt) in &checkpoints {
            let rows: Vec<Observation> = wet.iter().filter(|o| o.stage <= k).cloned().collect();
            if !rows.iter().any(|o| o.stage == k) {
                continue;
            }
            let (x, y, st) = wet_matrix(&rows, &ckpt.columns);
            let r = evaluate::evaluate_stage(k, &ckpt.model, &x, &y, &st)?;
            if let Some(r2) = r.prospective_cumulative_r2 {
                cumulative.push(evaluate::CumulativeR2 {
                    stage: k,
                    rows: r.cumulative_rows,
                    r2,
                });
            }
            reports.push(r);
        }
        let issued = self.issued_signatures()?;
        let ids: Vec<(String, String)> = wet
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let id = if o.provenance_id.is_empty() {
                    format!("wetlab_{i}")
                } else {
                    o.provenance_id.clone()
                };
                (id, o.vector.signature())
            })
            .collect();
        let attribution = evaluate::cross_reference(&issued, &ids);

        let dir = self.evaluation_dir();
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let p = dir.join(name);
            write_atomic(&p, &bytes)?;
            written.push(p);
            Ok(())
        };
        put("stage_metrics.csv", csv_to_bytes(|b| evaluate::write_stage_reports_csv(&reports, b))?)?;
        put("cumulative_r2.csv", csv_to_bytes(|b| evaluate::write_cumulative_csv(&cumulative, b))?)?;
        put("attribution.csv", csv_to_bytes(|b| evaluate::write_attribution_csv(&attribution, b))?)?;
        Ok((reports, written))
    }

    // ---- explainability ----------------------------------------------------

    pub fn explain_report(&self, ckpt: &Checkpoint) -> Result<ExplainReport> {
        let cfg = &self.config.explain;
        let seed = stage_seed(self.config.seed, ckpt.stage, 40);
        let d = ckpt.columns.len();
        let x = ckpt.training.matrix(d);
        let y = &ckpt.training.y;
        let context = ckpt.context()?;
        let importance =
            explain::permutation_importance(&ckpt.model, &x, y, &context.weights, cfg.permutation_repeats, seed)?;
        let shap = if cfg.shap && cfg.shap_samples >= d + 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pick = |n: usize| -> Vec<usize> {
                let mut v = index::sample(&mut rng, x.nrows(), n.min(x.nrows())).into_vec();
                v.sort_unstable();
                v
            };
            let bg = x.select_rows(&pick(cfg.shap_background));
            let ex = x.select_rows(&pick(cfg.shap_explained));
            Some(explain::kernel_shap(&ckpt.model, &bg, &ex, cfg.shap_samples, seed)?)
        } else {
            None
        };
        let space = self.space(ckpt, PoolKind::General)?;
        let landscape =
            explain::landscape_grids(&ckpt.model, &context, &space, &importance, &ckpt.acquisition, &cfg.grid)?;
        let wet: Vec<usize> = (0..y.len()).filter(|&i| ckpt.training.sources[i] == Source::Wetlab).collect();
        let dashboard = if wet.is_empty() {
            explain::uncertainty_dashboard(&ckpt.model, &x, y)?
        } else {
            let yw: Vec<f64> = wet.iter().map(|&i| y[i]).collect();
            explain::uncertainty_dashboard(&ckpt.model, &x.select_rows(&wet), &yw)?
        };
        Ok(ExplainReport {
            importance,
            shap,
            landscape,
            dashboard,
        })
    }

    pub fn explain(&self) -> Result<Vec<PathBuf>> {
        let ckpt = self.latest_checkpoint()?;
        let report = self.explain_report(&ckpt)?;
        explain::write_artifacts(&self.stage_dir(ckpt.stage).join("explain"), &report, &ckpt.columns)
    }

    // ---- pipeline ----------------------------------------------------------

    /// parse → fit/update → candidates (both pools) → slate → evaluate →
    /// explain. The manifest is written to the stage directory whether or
    /// not every step succeeds.
    pub fn run_stage(&self) -> Result<Manifest> {
        let mut manifest = Manifest {
            stage: None,
            seed: self.config.seed,
            complete: false,
            steps: Vec::new(),
        };
        let result = self.run_steps(&mut manifest);
        manifest.complete = result.is_ok();
        let dir = match manifest.stage {
            Some(k) => self.stage_dir(k),
            None => self.root.clone(),
        };
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        result.map(|_| manifest)
    }

    fn run_steps(&self, m: &mut Manifest) -> Result<()> {
        fn record<T>(
            m: &mut Manifest,
            step: &str,
            r: Result<T>,
            artifacts: impl FnOnce(&T) -> Vec<String>,
        ) -> Result<T> {
            match r {
                Ok(v) => {
                    m.steps.push(StepRecord {
                        step: step.into(),
                        ok: true,
                        artifacts: artifacts(&v),
                        message: None,
                    });
                    Ok(v)
                }
                Err(e) => {
                    m.steps.push(StepRecord {
                        step: step.into(),
                        ok: false,
                        artifacts: vec![],
                        message: Some(e.to_string()),
                    });
                    Err(e)
                }
            }
        }
        let paths = |v: &Vec<PathBuf>| v.iter().map(|p| self.rel(p)).collect::<Vec<_>>();

        let raw = self.root.join(&self.config.data.literature);
        if raw.is_file() {
            record(m, "parse", self.parse(None), |(_, w)| paths(w))?;
        }
        let outcome = record(m, "fit", self.update(), |o| vec![self.rel(&self.checkpoint_path(o.stage()))])?;
        m.stage = Some(outcome.stage());
        for pool in [PoolKind::General, PoolKind::DmsoFree] {
            for &mode in &self.config.candidates.modes {
                record(m, &format!("candidates_{pool}_{mode}"), self.candidates(pool, mode, None), |p| {
                    vec![self.rel(p)]
                })?;
            }
        }
        record(m, "next_batch", self.next_batch(None), paths)?;
        record(m, "evaluate", self.evaluate(), |(_, w)| paths(w))?;
        if self.config.explain.enabled {
            record(m, "explain", self.explain(), paths)?;
        }
        Ok(())
    }
}

/// Wet-lab rows in a checkpoint's column layout.
fn wet_matrix(rows: &[Observation], columns: &[FeatureColumn]) -> (DMatrix<f64>, Vec<f64>, Vec<u32>) {
    let x = DMatrix::from_fn(rows.len(), columns.len(), |i, j| {
        rows[i].vector.get(&columns[j].id).map_or(0.0, |a| a.value)
    });
    (
        x,
        rows.iter().map(|o| o.viability).collect(),
        rows.iter().map(|o| o.stage).collect(),
    )
}

fn candidates_csv(cands: &[Candidate], columns: &[FeatureColumn]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["rank".to_string()];
    header.extend(columns.iter().map(FeatureColumn::name));
    header.extend(
        ["predicted_viability", "predicted_std", "acquisition", "n_active", "pool", "mode", "seed", "signature"]
            .map(String::from),
    );
    w.write_record(&header)?;
    for (k, c) in cands.iter().enumerate() {
        let mut rec = vec![(k + 1).to_string()];
        rec.extend(c.vector.iter().map(|v| v.to_string()));
        rec.extend([
            c.mean.to_string(),
            c.std.to_string(),
            c.acquisition.to_string(),
            c.n_active.to_string(),
            c.pool.to_string(),
            c.mode.to_string(),
            c.seed.to_string(),
            c.signature.clone(),
        ]);
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::input(format!("csv buffer: {e}")))
}

fn candidates_summary(cands: &[Candidate], columns: &[FeatureColumn]) -> String {
    let mut s = String::new();
    if let Some(c) = cands.first() {
        s.push_str(&format!("{} candidates, pool {}, mode {}\n\n", cands.len(), c.pool, c.mode));
    }
    for (k, c) in cands.iter().enumerate() {
        let recipe: Vec<String> = columns
            .iter()
            .zip(&c.vector)
            .filter(|(col, v)| **v >= col.unit.trace_floor())
            .map(|(col, v)| match col.unit {
                crate::ingest::UnitClass::Molar => format!("{:.3} M {}", v, col.id),
                crate::ingest::UnitClass::Percent => format!("{:.2}% {}", v, col.id),
            })
            .collect();
        s.push_str(&format!(
            "{:>3}. viability {:.1} ± {:.1}, acquisition {:.2}: {}\n",
            k + 1,
            c.mean,
            c.std,
            c.acquisition,
            recipe.join(" + ")
        ));
    }
    s
}

fn read_candidates_csv(path: &Path, columns: &[FeatureColumn], pool: PoolKind) -> Result<Vec<Candidate>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |n: &str| {
        headers
            .iter()
            .position(|h| h == n)
            .ok_or_else(|| Error::input(format!("{}: missing column {n}", path.display())))
    };
    let feature_idx: Vec<usize> = columns.iter().map(|c| find(&c.name())).collect::<Result<_>>()?;
    let (mi, si, ai, ni, mo, se) = (
        find("predicted_viability")?,
        find("predicted_std")?,
        find("acquisition")?,
        find("n_active")?,
        find("mode")?,
        find("seed")?,
    );
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::input(format!("{}: bad number in column {i}", path.display())))
        };
        let vector: Vec<f64> = feature_idx.iter().map(|&i| num(i)).collect::<Result<_>>()?;
        out.push(Candidate {
            signature: crate::ingest::row_signature(&vector, columns),
            vector,
            mean: num(mi)?,
            std: num(si)?,
            acquisition: num(ai)?,
            n_active: num(ni)? as usize,
            pool,
            mode: rec.get(mo).unwrap_or("bo").parse()?,
            seed: num(se)? as u64,
        });
    }
    Ok(out)
}

fn read_signature_column(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let Some(i) = rdr.headers()?.iter().position(|h| h == "signature") else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        out.push(rec?.get(i).unwrap_or("").to_string());
    }
    Ok(out)
}

fn template_csv(slate: &Slate, rows: &[usize], space: &SearchSpace, stage: u32) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["stage".to_string(), "slate_row".into(), "role".into()];
    header.extend(space.columns.iter().map(FeatureColumn::name));
    header.extend(["predicted_mean", "predicted_std", "signature", "measured_viability"].map(String::from));
    w.write_record(&header)?;
    for &i in rows {
        let r = &slate.rows[i];
        let mut rec = vec![stage.to_string(), i.to_string(), r.role.to_string()];
        rec.extend(r.vector.iter().map(|v| v.to_string()));
        rec.extend([r.mean.to_string(), r.std.to_string(), r.signature.clone(), String::new()]);
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::input(format!("csv buffer: {e}")))
}
