//! Retrieval metrics and re-ranking.

mod embed;
mod metrics;
mod rerank;

pub use embed::{embed_images, evaluate, evaluate_embeddings, EmbeddingSet, EvalOptions, EvalReport, EMBEDDING_MAGIC, REPORT_HEADER};
pub use metrics::{cmc_map, pairwise_l2, DistanceMatrix, Labels, Metrics};
pub use rerank::{k_reciprocal_rerank, RerankParams};
