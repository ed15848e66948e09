//! Parsers for SAST report formats and ground-truth labels, source file
//! attachment, and dataset splitting.

mod canonical;
mod ground_truth;
mod sarif;
mod source;
mod split;
mod spotbugs;

pub use canonical::{emit_canonical_jsonl, parse_canonical_jsonl};
pub use ground_truth::{load_ground_truth, GroundTruthResult};
pub use sarif::parse_sarif;
pub use source::{attach_source, SourceRoot};
pub use split::{split_dataset, DatasetSplit};
pub use spotbugs::parse_spotbugs_xml;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed XML at {0}")]
    Xml(roxmltree::TextPos),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("missing runs array in SARIF document")]
    SarifShape,
    #[error("conflicting labels for finding {0}")]
    ConflictingLabel(String),
    #[error("path {0:?} escapes the source root")]
    PathTraversal(String),
    #[error("invalid label file: {0}")]
    LabelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
