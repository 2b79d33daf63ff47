//! Building blocks for adapting a chat model to the nuclear-fusion domain:
//! source ingestion, QA synthesis, proportioned corpus assembly,
//! chain-of-thought prompting and questionnaire-based assessment.

pub mod assessment;
pub mod corpus;
pub mod cot_prompting;
pub mod ingest;
pub mod jsonl;
pub mod llm_client;
pub mod qagen;
pub mod text;

pub use ingest::{Lang, SourceKind};
