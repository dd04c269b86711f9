//! Embeddings, density clustering and clustering metrics.

pub mod embed;
pub mod hdbscan;
pub mod metrics;

pub use embed::{Embedder, EmbeddingSource, EmbeddingVector, HashEmbedder, HttpEmbedder};
pub use hdbscan::{hdbscan, ClusterLabels, HdbscanParams};
pub use metrics::{
    adjusted_rand_index, centroid, centroid_set_similarity, clustering_quality, information_scores,
    ClusteringQuality,
};
