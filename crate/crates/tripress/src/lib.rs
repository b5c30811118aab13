//! Distributed dictionary encoding for RDF statement datasets.
//!
//! Compresses N-Triples / N-Quads into streams of 64-bit ids plus
//! hash-partitioned per-place term dictionaries, using a
//! filter-push-encode-pull-compress pipeline with bounded-memory chunk
//! loops, incremental updates, and load-balance instrumentation.

// The pipeline allocates and frees millions of short-lived term strings per
// iteration; mimalloc keeps that churn fast and its free lists compact.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod error;
pub mod gen;
pub mod metrics;
pub mod oracle;
pub mod orchestrator;
pub mod parser;
pub mod place;
pub mod storage;
pub mod term;
pub mod transport;

pub use error::{Error, Result};
