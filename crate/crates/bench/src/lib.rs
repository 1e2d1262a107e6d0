//! Shared inputs for the benchmarks.

use chart_refinery::analytics::synthetic::{gaussian_blobs, BlobSpec};
use chart_refinery::analytics::EmbeddingMatrix;

/// `n_clusters` blobs of `per_cluster` points in `dims` dimensions.
pub fn blobs(n_clusters: usize, per_cluster: usize, dims: usize) -> (EmbeddingMatrix, Vec<usize>) {
    gaussian_blobs(BlobSpec {
        n_clusters,
        per_cluster,
        dims,
        sigma: 0.1,
        min_separation: 10.0,
        seed: 17,
    })
    .expect("valid blob spec")
}

/// A critique completion with `n` recommendations and some noise lines.
pub fn completion(n: usize) -> String {
    let mut s = String::from("Here are my suggestions:\n\n");
    for i in 0..n {
        s.push_str(&format!("# Increase the font size of tick labels on axis {i}\n"));
        if i % 4 == 0 {
            s.push_str("some commentary that is not a recommendation\n#\n");
        }
    }
    s
}
