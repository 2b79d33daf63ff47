//! Pipeline stages behind the `fusionkit` command.

pub mod config;
pub mod stages;

use fusionkit_core::assessment::AssessmentError;
use fusionkit_core::corpus::CorpusError;
use fusionkit_core::cot_prompting::CotError;
use fusionkit_core::ingest::IngestError;
use fusionkit_core::jsonl::JsonlError;
use fusionkit_gateway::GatewayError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{0}")]
    Config(String),
    #[error("missing input artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Artifact(#[from] JsonlError),
    #[error(transparent)]
    Cot(#[from] CotError),
    #[error(transparent)]
    Assessment(#[from] AssessmentError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{0}")]
    Failed(String),
}

impl StageError {
    /// Stable identifier for the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            StageError::Config(_) => "config",
            StageError::MissingArtifact(_) => "missing_artifact",
            StageError::Ingest(_) => "ingest",
            StageError::Corpus(CorpusError::SchemaViolation(_)) => "schema_violation",
            StageError::Corpus(_) => "corpus",
            StageError::Artifact(_) => "artifact",
            StageError::Cot(_) => "cot_config",
            StageError::Assessment(_) => "assessment",
            StageError::Gateway(_) => "gateway",
            StageError::Failed(_) => "stage_failed",
        }
    }
}
