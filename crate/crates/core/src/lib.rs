//! Generative video retrieval over multi-view semantic IDs.
//!
//! Videos are tokenized into several residual-quantized semantic IDs (one
//! per view) that share a single codebook. A query model decodes code
//! sequences autoregressively; a prefix trie over all indexed IDs constrains
//! beam search to valid IDs, and recalled videos are re-ranked by dense
//! cosine similarity.

pub mod checkpoint;
pub mod config;
pub mod cotrainer;
pub mod error;
pub mod evalbench;
pub mod exec;
pub mod feature_store;
pub mod index;
pub mod kmeans;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod retriever;
pub mod search;
pub mod synthgen;
pub mod tokenizer;

pub use config::EngineConfig;
pub use error::{Error, Result};
pub use exec::Exec;
