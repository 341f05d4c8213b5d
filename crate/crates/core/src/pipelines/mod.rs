//! End-to-end detection: open-model reading mode, closed-model generation,
//! the membership-inference baseline, Fisher combination and scenario runs.

mod combine;
mod detect;
pub mod lab;
mod mia;
pub mod scenario;
pub mod svg;

use thiserror::Error;

use crate::dedup::DedupError;
use crate::models::remote::RemoteError;
use crate::models::ModelError;
use crate::schemes::SchemeError;
use crate::stats::StatsError;

pub use combine::{combine_distributions, CombinedReport};
pub use detect::{
    detect_closed, detect_open, DetectOptions, DetectionReport, Supervision, Suspect,
};
pub use mia::{calibrated_loss, mia_detect, zlib_len, MiaReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("capability error: {0}")]
    Capability(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("remote suspect failed: {error} ({} tuples scored before the failure)", partial.n_scored)]
    Remote {
        error: RemoteError,
        partial: Box<DetectionReport>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
