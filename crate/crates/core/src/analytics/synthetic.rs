//! Seeded synthetic corpora with known ground-truth labels.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{sq_dist, AnalyticsError, EmbeddingMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_clusters: usize,
    pub per_cluster: usize,
    pub dims: usize,
    pub sigma: f64,
    /// Every pair of centers is at least this far apart.
    pub min_separation: f64,
    pub seed: u64,
}

impl BlobSpec {
    /// 10 clusters of 100 points in 1536-D with sigma 0.1 and separation 10.
    pub fn ten_blobs(seed: u64) -> Self {
        BlobSpec {
            n_clusters: 10,
            per_cluster: 100,
            dims: 1536,
            sigma: 0.1,
            min_separation: 10.0,
            seed,
        }
    }
}

/// Isotropic Gaussian blobs. Returns the matrix and each row's generating
/// cluster; rows are shuffled so labels are not contiguous.
pub fn gaussian_blobs(spec: BlobSpec) -> Result<(EmbeddingMatrix, Vec<usize>), AnalyticsError> {
    let BlobSpec {
        n_clusters,
        per_cluster,
        dims,
        sigma,
        min_separation,
        seed,
    } = spec;
    if n_clusters == 0 || per_cluster == 0 || dims == 0 {
        return Err(AnalyticsError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Random Gaussian centers have pairwise distance near scale * sqrt(2D).
    let scale = 1.5 * min_separation / (2.0 * dims as f64).sqrt();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    let mut tries = 0;
    while centers.len() < n_clusters {
        tries += 1;
        if tries > 10_000 {
            return Err(AnalyticsError::Format("could not place separated blob centers".into()));
        }
        let c: Vec<f64> = (0..dims)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        if centers.iter().all(|o| sq_dist(o, &c).sqrt() >= min_separation) {
            centers.push(c);
        }
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| AnalyticsError::Format(e.to_string()))?;
    let mut order: Vec<usize> = (0..n_clusters * per_cluster).map(|i| i / per_cluster).collect();
    order.shuffle(&mut rng);
    let mut values = Vec::with_capacity(order.len() * dims);
    for &label in &order {
        values.extend(centers[label].iter().map(|c| c + noise.sample(&mut rng)));
    }
    let ids = (0..order.len()).map(|i| format!("p{i:05}")).collect();
    Ok((EmbeddingMatrix::new(ids, dims, values)?, order))
}

/// Ten recommendation themes with pairwise-disjoint vocabularies.
pub const THEMES: [(&str, [&str; 8]); 10] = [
    ("axis", ["axis", "label", "units", "xlabel", "ylabel", "descriptive", "quantity", "measured"]),
    ("legend", ["legend", "outside", "overlap", "anchor", "entries", "placement", "corner", "box"]),
    ("color", ["colorblind", "palette", "viridis", "hue", "contrast", "red", "green", "accessible"]),
    ("title", ["title", "heading", "headline", "caption", "summarize", "takeaway", "subtitle", "message"]),
    ("font", ["font", "fontsize", "larger", "readable", "tiny", "typography", "text", "points"]),
    ("grid", ["grid", "gridlines", "faint", "alpha", "lighter", "dashed", "background", "subtle"]),
    ("ticks", ["ticks", "tick", "rotate", "crowded", "interval", "spacing", "marks", "thousands"]),
    ("annotation", ["annotate", "annotation", "highlight", "peak", "callout", "arrow", "outlier", "note"]),
    ("layout", ["layout", "tight", "margins", "whitespace", "aspect", "ratio", "cramped", "figsize"]),
    ("markers", ["marker", "markers", "opacity", "transparency", "scatter", "dots", "overplotting", "jitter"]),
];

/// `per_theme` synthetic critique lines per theme, each built from six of
/// the theme's words. Returns (text, theme index) pairs in shuffled order.
pub fn themed_recommendations(per_theme: usize, seed: u64) -> Vec<(String, usize)> {
    const LEADS: [&str; 4] = ["Consider", "Please", "Try", "Ensure"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_theme * THEMES.len());
    for (theme, (_, words)) in THEMES.iter().enumerate() {
        for _ in 0..per_theme {
            let picked: Vec<&str> = words.choose_multiple(&mut rng, 6).copied().collect();
            let lead = LEADS[rng.random_range(0..LEADS.len())];
            out.push((format!("{lead} {}.", picked.join(" ")), theme));
        }
    }
    out.shuffle(&mut rng);
    out
}
