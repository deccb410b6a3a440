//! Closed-loop formulation discovery.
//!
//! The crate turns free-text cryoprotectant recipes into a feature matrix
//! ([`ingest`]), fits a Matérn-5/2 Gaussian-process surrogate
//! ([`surrogate`]) that is corrected by a wet-lab residual process and
//! calibrated ([`composite`]), proposes new formulations by constrained
//! random search or penalized UCB differential evolution ([`optimizer`]),
//! designs 20-row wet-lab slates ([`batchgen`]), scores frozen stage
//! checkpoints ([`evaluate`]), produces interpretability grids
//! ([`explain`]) and ties everything together on disk ([`campaign`]).

pub mod batchgen;
pub mod campaign;
pub mod composite;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod ingest;
pub mod optimizer;
pub mod stats;
pub mod surrogate;

pub use error::{Error, Result};

// The guide under book/ is compiled here so its snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    pub mod ingest {}
    #[doc = include_str!("../../../book/src/surrogate.md")]
    pub mod surrogate {}
    #[doc = include_str!("../../../book/src/composite.md")]
    pub mod composite {}
    #[doc = include_str!("../../../book/src/optimizer.md")]
    pub mod optimizer {}
    #[doc = include_str!("../../../book/src/batchgen.md")]
    pub mod batchgen {}
    #[doc = include_str!("../../../book/src/evaluate.md")]
    pub mod evaluate {}
    #[doc = include_str!("../../../book/src/explain.md")]
    pub mod explain {}
    #[doc = include_str!("../../../book/src/campaign.md")]
    pub mod campaign {}
}
