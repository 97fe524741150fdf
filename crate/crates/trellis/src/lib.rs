//! Multi-granular Graph-RAG indexing and retrieval.
//!
//! trellis builds two coordinated structures over a corpus: a knowledge-graph
//! skeleton (entities and relations extracted from the chunks PageRank says
//! matter most) and a keyword-to-text bipartite lattice over every sub-chunk.
//! Retrieval blends both channels under a single token budget.

pub mod bipartite;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evalkit;
pub mod extraction;
pub mod gateway;
pub mod graph;
pub mod indexer;
pub mod retrieval;
pub mod testkit;
pub mod tokenizer;

pub use error::{Error, Result};
