use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::ClusteringResult;
use super::{sq_dist, AnalyticsError, EmbeddingMatrix};

pub const TOP_TERMS: usize = 5;
pub const MEDOID_EXAMPLES: usize = 5;

pub const STOPWORDS: &[&str] = &[
    "a", "about", "add", "all", "also", "an", "and", "any", "are", "as", "at", "be", "but", "by", "can", "chart",
    "consider", "could", "do", "does", "each", "for", "from", "has", "have", "if", "in", "into", "is", "it", "its",
    "make", "may", "more", "most", "not", "of", "on", "one", "or", "other", "plot", "should", "so", "some", "such",
    "than", "that", "the", "their", "them", "then", "there", "these", "this", "those", "to", "too", "use", "using",
    "very", "was", "were", "what", "when", "which", "while", "will", "with", "would", "you", "your",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub top_terms: Vec<String>,
    /// Row ids ordered by summed distance to co-members; the first is the medoid.
    pub medoid_ids: Vec<String>,
    pub medoid_texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n_rows: usize,
    pub selected_k: usize,
    pub db_score: Option<f64>,
    pub db_curve: Vec<(usize, Option<f64>)>,
    pub clusters: Vec<ClusterSummary>,
}

/// Most frequent non-stopword tokens; ties are broken alphabetically.
pub fn top_terms<'a>(texts: impl IntoIterator<Item = &'a str>, n: usize) -> Vec<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in text.split(|c: char| !c.is_alphanumeric()) {
            let tok = tok.to_lowercase();
            if tok.chars().count() < 2 || tok.chars().all(|c| c.is_ascii_digit()) || STOPWORDS.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(n).map(|(t, _)| t).collect()
}

/// Summarizes each cluster by its top terms and the members closest to
/// the rest of the cluster. `texts[i]` belongs to row `i` of `matrix`.
pub fn build_cluster_report(
    matrix: &EmbeddingMatrix,
    clustering: &ClusteringResult,
    texts: &[String],
    db_curve: Vec<(usize, Option<f64>)>,
) -> Result<ClusterReport, AnalyticsError> {
    if texts.len() != matrix.n_rows() || clustering.assignments.len() != matrix.n_rows() {
        return Err(AnalyticsError::Format(format!(
            "{} texts and {} assignments for {} rows",
            texts.len(),
            clustering.assignments.len(),
            matrix.n_rows()
        )));
    }
    let clusters = (0..clustering.k)
        .map(|c| {
            let members = clustering.members(c);
            let totals: Vec<f64> = members
                .par_iter()
                .map(|&i| members.iter().map(|&j| sq_dist(matrix.row(i), matrix.row(j)).sqrt()).sum())
                .collect();
            let mut order: Vec<usize> = (0..members.len()).collect();
            order.sort_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(members[a].cmp(&members[b])));
            let picked: Vec<usize> = order.into_iter().take(MEDOID_EXAMPLES).map(|o| members[o]).collect();
            ClusterSummary {
                cluster: c,
                size: members.len(),
                top_terms: top_terms(members.iter().map(|&i| texts[i].as_str()), TOP_TERMS),
                medoid_ids: picked.iter().map(|&i| matrix.ids()[i].clone()).collect(),
                medoid_texts: picked.iter().map(|&i| texts[i].clone()).collect(),
            }
        })
        .collect();
    Ok(ClusterReport {
        n_rows: matrix.n_rows(),
        selected_k: clustering.k,
        db_score: clustering.db_score,
        db_curve,
        clusters,
    })
}

impl ClusterReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Recommendation clusters\n");
        let _ = writeln!(
            out,
            "{} recommendations, k = {} (Davies–Bouldin {}).\n",
            self.n_rows,
            self.selected_k,
            fmt_score(self.db_score)
        );
        let _ = writeln!(out, "## Davies–Bouldin by k\n\n| k | DB |\n|---|---|");
        for (k, db) in &self.db_curve {
            let _ = writeln!(out, "| {k} | {} |", fmt_score(*db));
        }
        let mut by_size: Vec<&ClusterSummary> = self.clusters.iter().collect();
        by_size.sort_by(|a, b| b.size.cmp(&a.size).then(a.cluster.cmp(&b.cluster)));
        for c in by_size {
            let _ = writeln!(out, "\n## Cluster {} ({} items): {}\n", c.cluster, c.size, c.top_terms.join(", "));
            for t in &c.medoid_texts {
                let _ = writeln!(out, "- {t}");
            }
        }
        out
    }
}

fn fmt_score(db: Option<f64>) -> String {
    db.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}
