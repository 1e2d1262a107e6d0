//! Lloyd's k-means with k-means++ seeding, finished by Hartigan
//! single-point transfers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dbi::davies_bouldin;
use super::{sq_dist, AnalyticsError, EmbeddingMatrix};

pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Converged once no centroid moves farther than this.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// `None` when two centroids coincide and the index is undefined.
    pub db_score: Option<f64>,
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Inertia after each assign/update step.
    #[serde(skip)]
    pub inertia_trace: Vec<f64>,
}

impl ClusteringResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Coordinate-wise mean of all rows: the single-cluster solution.
pub fn centroid_of(matrix: &EmbeddingMatrix) -> Vec<f64> {
    let mut mean = vec![0.0; matrix.dims()];
    for row in matrix.rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = matrix.n_rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn plus_plus_init(matrix: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = matrix.n_rows();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(matrix.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = matrix.rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        let c = matrix.row(pick).to_vec();
        d2.par_iter_mut()
            .zip(matrix.values().par_chunks_exact(matrix.dims()))
            .for_each(|(d, row)| *d = d.min(sq_dist(row, &c)));
        centroids.push(c);
    }
    centroids
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn update_centroids(matrix: &EmbeddingMatrix, assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dims = matrix.dims();
    let mut sums = vec![vec![0.0; dims]; k];
    let mut counts = vec![0usize; k];
    for (row, &a) in matrix.rows().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(row) {
            *s += x;
        }
    }
    for (sum, count) in sums.iter_mut().zip(counts) {
        let c = count.max(1) as f64;
        sum.iter_mut().for_each(|s| *s /= c);
    }
    sums
}

/// Moves, for each empty cluster, the point farthest from its centroid
/// (taken from a cluster with at least two members) into it.
fn repair_empty(assignments: &mut [usize], dists: &mut [f64], k: usize) {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let far = (0..assignments.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("n >= k guarantees a donor cluster");
        sizes[assignments[far]] -= 1;
        sizes[empty] += 1;
        assignments[far] = empty;
        dists[far] = 0.0;
    }
}

fn inertia_of(matrix: &EmbeddingMatrix, assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    matrix
        .values()
        .par_chunks_exact(matrix.dims())
        .zip(assignments.par_iter())
        .map(|(row, &a)| sq_dist(row, &centroids[a]))
        .sum()
}

/// Moves single points between clusters while any move lowers the total
/// within-cluster sum of squares. Returns the number of moves made.
fn hartigan_refine(matrix: &EmbeddingMatrix, assignments: &mut [usize], centroids: &mut [Vec<f64>], max_sweeps: usize) -> usize {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    let mut moves = 0;
    for _ in 0..max_sweeps {
        let mut moved = false;
        for (i, row) in matrix.rows().enumerate() {
            let from = assignments[i];
            let n_from = sizes[from] as f64;
            if sizes[from] < 2 {
                continue;
            }
            let removal_gain = n_from / (n_from - 1.0) * sq_dist(row, &centroids[from]);
            let (to, add_cost) = (0..k)
                .filter(|&j| j != from)
                .map(|j| {
                    let n = sizes[j] as f64;
                    (j, n / (n + 1.0) * sq_dist(row, &centroids[j]))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("k >= 2");
            if add_cost >= removal_gain * (1.0 - 1e-12) {
                continue;
            }
            let n_to = sizes[to] as f64;
            for (c, x) in centroids[from].iter_mut().zip(row) {
                *c = (*c * n_from - x) / (n_from - 1.0);
            }
            for (c, x) in centroids[to].iter_mut().zip(row) {
                *c = (*c * n_to + x) / (n_to + 1.0);
            }
            sizes[from] -= 1;
            sizes[to] += 1;
            assignments[i] = to;
            moves += 1;
            moved = true;
        }
        if !moved {
            break;
        }
    }
    moves
}

pub fn kmeans(matrix: &EmbeddingMatrix, params: KMeansParams) -> Result<ClusteringResult, AnalyticsError> {
    let KMeansParams { k, seed, max_iters, tol } = params;
    if k < 2 {
        return Err(AnalyticsError::InvalidK(k));
    }
    if matrix.n_rows() < k {
        return Err(AnalyticsError::TooFewRows {
            rows: matrix.n_rows(),
            needed: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(matrix, k, &mut rng);
    let mut assignments = vec![0usize; matrix.n_rows()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let (assign, mut dists): (Vec<usize>, Vec<f64>) = matrix
            .values()
            .par_chunks_exact(matrix.dims())
            .map(|row| nearest(row, &centroids))
            .unzip();
        assignments = assign;
        repair_empty(&mut assignments, &mut dists, k);
        let updated = update_centroids(matrix, &assignments, k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        trace.push(inertia_of(matrix, &assignments, &centroids));
        if shift < tol {
            break;
        }
    }

    if hartigan_refine(matrix, &mut assignments, &mut centroids, max_iters.max(1)) > 0 {
        centroids = update_centroids(matrix, &assignments, k);
        trace.push(inertia_of(matrix, &assignments, &centroids));
    }

    let inertia = *trace.last().expect("at least one iteration");
    let db_score = davies_bouldin(matrix, &assignments, &centroids).ok();
    Ok(ClusteringResult {
        k,
        assignments,
        centroids,
        db_score,
        inertia,
        seed,
        iterations,
        inertia_trace: trace,
    })
}
