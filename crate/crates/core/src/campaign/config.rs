use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::batchgen::BatchConfig;
use crate::composite::NoiseConfig;
use crate::error::{Error, Result};
use crate::explain::GridConfig;
use crate::optimizer::{AcquisitionConfig, DeSettings, PoolConfig, PoolKind, SearchMode};
use crate::surrogate::{FitOptions, HyperBounds};

/// Project configuration. Every key is optional; the defaults reproduce the
/// published workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub surrogate: SurrogateConfig,
    pub noise: NoiseConfig,
    pub pools: PoolsConfig,
    pub acquisition: AcquisitionConfig,
    pub de: DeSettings,
    pub candidates: CandidateConfig,
    pub batch: BatchConfig,
    pub explain: ExplainConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seed: 42,
            data: DataConfig::default(),
            surrogate: SurrogateConfig::default(),
            noise: NoiseConfig::default(),
            pools: PoolsConfig::default(),
            acquisition: AcquisitionConfig::default(),
            de: DeSettings::default(),
            candidates: CandidateConfig::default(),
            batch: BatchConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl CampaignConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: CampaignConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.surrogate.restarts == 0 {
            return bad("surrogate.restarts must be ≥ 1".into());
        }
        if self.surrogate.cv_folds < 2 {
            return bad("surrogate.cv_folds must be ≥ 2".into());
        }
        if !(self.noise.literature > 0.0 && self.noise.wetlab > 0.0) {
            return bad("noise alphas must be positive".into());
        }
        if self.candidates.count == 0 || self.candidates.modes.is_empty() {
            return bad("candidates.count and candidates.modes must be non-empty".into());
        }
        let b = &self.batch;
        if b.min_exploit > b.max_exploit || b.slate_size < b.coverage_probes + b.max_exploit {
            return bad("batch sizes are inconsistent".into());
        }
        if b.min_capacity > b.max_capacity || b.max_capacity > b.slate_size {
            return bad("batch capacities must satisfy min ≤ max ≤ slate_size".into());
        }
        if self.de.popsize == 0 {
            return bad("de.popsize must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn fit_options(&self, seed: u64) -> FitOptions {
        FitOptions {
            restarts: self.surrogate.restarts,
            seed,
            bounds: self.surrogate.bounds,
            max_evals: self.surrogate.max_evals,
        }
    }

    pub fn pool(&self, kind: PoolKind) -> PoolConfig {
        PoolConfig {
            kind,
            dmso_cap_percent: match kind {
                PoolKind::General => self.pools.general_dmso_cap_percent,
                PoolKind::DmsoFree => self.pools.dmso_free_dmso_cap_percent,
            },
            max_active_ingredients: self.pools.max_active_ingredients,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw literature records, relative to the project directory.
    pub literature: PathBuf,
    /// Optional ingredient registry replacing the built-in one.
    pub registry: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            literature: PathBuf::from("data/literature.csv"),
            registry: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub restarts: usize,
    pub max_evals: usize,
    pub cv_folds: usize,
    pub bounds: HyperBounds,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            restarts: 10,
            max_evals: 300,
            cv_folds: 5,
            bounds: HyperBounds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolsConfig {
    /// % v/v.
    pub general_dmso_cap_percent: f64,
    /// % v/v.
    pub dmso_free_dmso_cap_percent: f64,
    pub max_active_ingredients: usize,
}

impl Default for PoolsConfig {
    fn default() -> Self {
        PoolsConfig {
            general_dmso_cap_percent: 5.0,
            dmso_free_dmso_cap_percent: 0.5,
            max_active_ingredients: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub count: usize,
    /// Random-search pool size.
    pub pool_size: usize,
    pub max_sampled_ingredients: usize,
    /// Modes generated by `run-stage`; the slate draws on `bo` output.
    pub modes: Vec<SearchMode>,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            count: 20,
            pool_size: 5000,
            max_sampled_ingredients: 6,
            modes: vec![SearchMode::Random, SearchMode::BayesOpt],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub enabled: bool,
    pub permutation_repeats: usize,
    pub shap: bool,
    pub shap_background: usize,
    pub shap_explained: usize,
    pub shap_samples: usize,
    pub grid: GridConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            enabled: true,
            permutation_repeats: 10,
            shap: true,
            shap_background: 50,
            shap_explained: 50,
            shap_samples: 256,
            grid: GridConfig::default(),
        }
    }
}
