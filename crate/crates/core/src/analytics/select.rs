use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, ClusteringResult, KMeansParams};
use super::{AnalyticsError, EmbeddingMatrix};

/// Inclusive range of cluster counts to sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

impl KRange {
    pub fn new(min: usize, max: usize) -> Result<Self, AnalyticsError> {
        if min < 2 || min > max {
            return Err(AnalyticsError::InvalidKRange { min, max });
        }
        Ok(KRange { min, max })
    }

    pub fn iter(self) -> std::ops::RangeInclusive<usize> {
        self.min..=self.max
    }
}

impl Default for KRange {
    fn default() -> Self {
        KRange { min: 2, max: 20 }
    }
}

impl fmt::Display for KRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.min, self.max)
    }
}

impl FromStr for KRange {
    type Err = AnalyticsError;

    /// Accepts `2:20`, `2..20` or `2..=20`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AnalyticsError::Format(format!("k range {s:?} is not of the form MIN:MAX"));
        let (a, b) = s
            .split_once("..=")
            .or_else(|| s.split_once(".."))
            .or_else(|| s.split_once(':'))
            .ok_or_else(bad)?;
        let min = a.trim().parse().map_err(|_| bad())?;
        let max = b.trim().parse().map_err(|_| bad())?;
        KRange::new(min, max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: ClusteringResult,
    /// Best DB per k; `None` where every seed gave coincident centroids.
    pub curve: Vec<(usize, Option<f64>)>,
}

fn better(a: &ClusteringResult, b: &ClusteringResult) -> bool {
    match (a.db_score, b.db_score) {
        (Some(x), Some(y)) => x < y || (x == y && (a.k, a.seed) < (b.k, b.seed)),
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => (a.k, a.seed) < (b.k, b.seed),
    }
}

/// Sweeps `range`, keeping for each k the seed with the lowest DB index,
/// and returns the global minimum. Ties go to the smaller k, then the
/// smaller seed.
pub fn select_k(matrix: &EmbeddingMatrix, range: KRange, seeds: &[u64]) -> Result<Selection, AnalyticsError> {
    if matrix.n_rows() < range.max {
        return Err(AnalyticsError::TooFewRows {
            rows: matrix.n_rows(),
            needed: range.max,
        });
    }
    if seeds.is_empty() {
        return Err(AnalyticsError::Format("at least one seed is required".into()));
    }
    let jobs: Vec<(usize, u64)> = range.iter().flat_map(|k| seeds.iter().map(move |&s| (k, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(k, seed)| kmeans(matrix, KMeansParams::new(k, seed)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut per_k: Vec<ClusteringResult> = Vec::new();
    for run in runs {
        match per_k.last_mut() {
            Some(cur) if cur.k == run.k => {
                if better(&run, cur) {
                    *cur = run;
                }
            }
            _ => per_k.push(run),
        }
    }
    let curve = per_k.iter().map(|r| (r.k, r.db_score)).collect();
    let best = per_k
        .into_iter()
        .filter(|r| r.db_score.is_some())
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .ok_or(AnalyticsError::UnclusterableCorpus)?;
    Ok(Selection { best, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_range_parsing() {
        assert_eq!("2:20".parse::<KRange>().unwrap(), KRange::new(2, 20).unwrap());
        assert_eq!("3..=7".parse::<KRange>().unwrap(), KRange::new(3, 7).unwrap());
        assert!("1:4".parse::<KRange>().is_err());
        assert!("9:4".parse::<KRange>().is_err());
        assert!("x".parse::<KRange>().is_err());
    }

    #[test]
    fn identical_points_are_unclusterable() {
        let m = EmbeddingMatrix::from_points(vec![vec![0.5, 0.5]; 8]).unwrap();
        let r = select_k(&m, KRange::new(2, 4).unwrap(), &[0, 1]);
        assert!(matches!(r, Err(AnalyticsError::UnclusterableCorpus)));
    }

    #[test]
    fn too_few_rows_for_range() {
        let m = EmbeddingMatrix::from_points(vec![vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            select_k(&m, KRange::new(2, 5).unwrap(), &[0]),
            Err(AnalyticsError::TooFewRows { rows: 3, needed: 5 })
        ));
    }

    #[test]
    fn tie_prefers_smaller_seed() {
        let m = EmbeddingMatrix::from_points(vec![vec![0.0], vec![0.1], vec![9.0], vec![9.1]]).unwrap();
        let s = select_k(&m, KRange::new(2, 2).unwrap(), &[7, 3, 5]).unwrap();
        assert_eq!(s.best.seed, 3);
    }
}
