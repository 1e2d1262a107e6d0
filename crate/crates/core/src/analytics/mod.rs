//! Recommendation analytics: embed critique texts, cluster them with
//! k-means, pick k by the Davies–Bouldin index and summarize the clusters.

mod corpus;
mod dbi;
mod embed;
mod kmeans;
mod matrix;
mod metrics;
mod projection;
mod report;
mod select;
pub mod synthetic;

use thiserror::Error;

use crate::backend::BackendError;

pub use corpus::{load_corpus, run_eval, CorpusEntry, EvalArtifacts, EvalParams, ProgressFn};
pub use dbi::davies_bouldin;
pub use embed::{EmbedConfig, Embedder};
pub use kmeans::{centroid_of, kmeans, ClusteringResult, KMeansParams, DEFAULT_MAX_ITERS, DEFAULT_TOL};
pub use matrix::{EmbeddingMatrix, DEFAULT_EMBEDDING_DIMS, EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION};
pub use metrics::adjusted_rand_index;
pub use projection::{project_2d, read_external_projection, write_projection_csv, Projection2D, ProjectionMethod};
pub use report::{build_cluster_report, top_terms, ClusterReport, ClusterSummary, STOPWORDS};
pub use select::{select_k, KRange, Selection};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{rows} row(s) but at least {needed} needed")]
    TooFewRows { rows: usize, needed: usize },
    #[error("expected {expected}-dimensional vectors, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("duplicate row id {0:?}")]
    DuplicateRowId(String),
    #[error("invalid k={0}; k must be at least 2")]
    InvalidK(usize),
    #[error("invalid k range {min}..={max}")]
    InvalidKRange { min: usize, max: usize },
    #[error("centroids {first} and {second} coincide")]
    DegenerateCentroids { first: usize, second: usize },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("every k in the range produced coincident centroids")]
    UnclusterableCorpus,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
