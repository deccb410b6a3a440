//! Stage lifecycle, persistence and end-to-end runs.
//!
//! A project directory looks like
//!
//! ```text
//! cryoloop.toml            optional configuration
//! data/literature.csv      raw literature records
//! data/parsed.csv          parsed, deduplicated literature dataset
//! data/wetlab.csv          every ingested wet-lab measurement
//! stage_<k>/               artifacts designed with the stage-k checkpoint
//! evaluation/              cross-stage metrics
//! ```

mod checkpoint;
mod config;
mod project;

use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingRows, CHECKPOINT_FORMAT};
pub use config::{
    CampaignConfig, CandidateConfig, DataConfig, ExplainConfig, PoolsConfig, SurrogateConfig,
};
pub use project::{IngestSummary, Manifest, ParseSummary, Project, StepRecord, UpdateOutcome};

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
