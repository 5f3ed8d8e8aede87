//! Motive-driven retrieval and recommendation pipeline.
//!
//! Stages: ingest (filter and chronological split) -> augment (item
//! descriptions and embeddings) -> annotate (bundled motive inference) ->
//! recommend (dual retrieval, query synthesis, rank fusion, bounded
//! reflection) -> evaluate (full-ranking metrics) -> ablate (variant grid).
//!
//! Everything is deterministic under the mock backend: rerunning any stage
//! with identical inputs produces byte-identical artifacts.

pub mod annotate;
pub mod augment;
pub mod domain;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod index;
pub mod ingest;
pub mod pipeline;
pub mod retrieve;
pub mod search;
pub mod text;

pub use domain::{validate_config, PipelineConfig};
pub use error::{Error, Result};

/// Library/CLI version string, exposed through the FFI layer too.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
