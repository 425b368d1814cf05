//! Code registry, knowledge graph and code-to-node mapping ingestion, plus a
//! seeded synthetic corpus generator.
//!
//! File formats (UTF-8, no headers):
//!
//! * codes: one JSON object per line, `{"code_id", "system", "description"}`
//! * KG nodes: `node_id\ttype`
//! * KG edges: `head\trelation\ttail`
//! * mapping: `code_id\tnode_id`

mod kg;
mod registry;
mod synthetic;

pub use kg::{load_kg, write_kg, KgEdge, KgNode, KnowledgeGraph};
pub use registry::{
    load_codes, load_mapping, write_codes, write_mapping, CodeRegistry, CodingSystem, MappingReport,
    MedicalCode,
};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticCorpus, SyntheticFiles};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Ingest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("synthetic corpus: {0}")]
    Synthetic(String),
}
