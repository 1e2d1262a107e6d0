use super::{sq_dist, AnalyticsError, EmbeddingMatrix};

/// Davies–Bouldin index of a partition (lower is better).
///
/// `S_i` is the mean Euclidean distance of cluster `i`'s members to its
/// centroid, `M_ij` the distance between centroids, and the index is the
/// mean over clusters of `max_{j != i} (S_i + S_j) / M_ij`.
pub fn davies_bouldin(
    matrix: &EmbeddingMatrix,
    assignments: &[usize],
    centroids: &[Vec<f64>],
) -> Result<f64, AnalyticsError> {
    let k = centroids.len();
    if k < 2 {
        return Err(AnalyticsError::InvalidK(k));
    }
    if assignments.len() != matrix.n_rows() {
        return Err(AnalyticsError::Format(format!(
            "{} assignments for {} rows",
            assignments.len(),
            matrix.n_rows()
        )));
    }
    if let Some(c) = centroids.iter().find(|c| c.len() != matrix.dims()) {
        return Err(AnalyticsError::DimensionMismatch {
            expected: matrix.dims(),
            got: c.len(),
        });
    }
    let mut scatter = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (row, &a) in matrix.rows().zip(assignments) {
        if a >= k {
            return Err(AnalyticsError::Format(format!("assignment {a} out of range for k={k}")));
        }
        scatter[a] += sq_dist(row, &centroids[a]).sqrt();
        counts[a] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(AnalyticsError::EmptyCluster(empty));
    }
    for (s, c) in scatter.iter_mut().zip(&counts) {
        *s /= *c as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let m = sq_dist(&centroids[i], &centroids[j]).sqrt();
            if m <= 0.0 {
                return Err(AnalyticsError::DegenerateCentroids { first: i.min(j), second: i.max(j) });
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}
