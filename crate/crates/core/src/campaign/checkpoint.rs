use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::composite::CompositeModel;
use crate::error::{Error, Result};
use crate::ingest::{FeatureColumn, Source};
use crate::optimizer::{AcquisitionConfig, ObservedContext, PoolConfig};

/// `major.minor`; loading refuses a different major version.
pub const CHECKPOINT_FORMAT: &str = "1.0";

/// Rows the checkpoint was trained on, in its feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRows {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub sources: Vec<Source>,
}

impl TrainingRows {
    pub fn matrix(&self, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.x.len(), d, |i, j| self.x[i][j])
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Frozen model state for one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: String,
    pub stage: u32,
    pub generator: String,
    pub created_unix: u64,
    pub columns: Vec<FeatureColumn>,
    /// Both GPs, the noise configuration and the calibration record. A
    /// checkpoint without a calibration record loads with `b = 0, s = 1`.
    pub model: CompositeModel,
    pub training: TrainingRows,
    /// Raw wet-lab observations (before deduplication) behind `training`.
    pub wetlab_observations: usize,
    pub tested_signatures: BTreeSet<String>,
    pub pools: Vec<PoolConfig>,
    pub acquisition: AcquisitionConfig,
    pub seed: u64,
}

impl Checkpoint {
    pub fn context(&self) -> Result<ObservedContext> {
        let d = self.columns.len();
        let weights = self.training.sources.iter().map(|s| self.model.noise.weight(*s)).collect();
        ObservedContext::new(
            self.training.matrix(d),
            self.training.y.clone(),
            self.training.sources.clone(),
            weights,
            &self.acquisition,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("checkpoint has no format_version".into()))?;
        let major = |v: &str| v.split('.').next().unwrap_or("").to_string();
        if major(found) != major(CHECKPOINT_FORMAT) {
            return Err(Error::Version {
                found: found.to_string(),
                expected: CHECKPOINT_FORMAT.to_string(),
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("invalid checkpoint: {e}")))?;
        let d = ckpt.columns.len();
        if ckpt.model.n_features() != d || ckpt.training.x.iter().any(|r| r.len() != d) {
            return Err(Error::Checkpoint("feature count disagrees with the column list".into()));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, checkpoint.to_json()?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}
