//! Offline evaluation: load a recommendation corpus, embed it, select k,
//! and write the artifact set.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    build_cluster_report, project_2d, read_external_projection, select_k, write_projection_csv, AnalyticsError,
    ClusterReport, Embedder, EmbeddingMatrix, KRange, Projection2D, Selection,
};
use crate::critique::parse_recommendations;
use crate::session::{sha256_hex, Session};

/// One recommendation text with where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
}

impl CorpusEntry {
    pub fn from_session(session: &Session) -> Vec<CorpusEntry> {
        session
            .recommendations
            .iter()
            .map(|r| CorpusEntry {
                id: r.id.clone(),
                text: r.text.clone(),
                session_id: Some(session.id.clone()),
                round: Some(r.round),
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct JsonlEntry {
    #[serde(default)]
    id: Option<String>,
    text: String,
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut children: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        children.sort();
        for child in children {
            collect_files(&child, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn load_file(path: &Path, out: &mut Vec<CorpusEntry>) -> Result<(), AnalyticsError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = path.file_stem().and_then(|n| n.to_str()).unwrap_or("corpus");
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    if name == "session.json" {
        let session: Session = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| AnalyticsError::Format(format!("{}: {e}", path.display())))?;
        out.extend(CorpusEntry::from_session(&session));
    } else if ext == "jsonl" {
        for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: JsonlEntry = serde_json::from_str(line)
                .map_err(|e| AnalyticsError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            out.push(CorpusEntry {
                id: e.id.unwrap_or_else(|| format!("{stem}:{}", i + 1)),
                text: e.text,
                session_id: None,
                round: None,
            });
        }
    } else if ext == "txt" {
        // Raw critique output: `#` lines are recommendations.
        let report = parse_recommendations(&fs::read_to_string(path)?);
        out.extend(report.recommendations.into_iter().map(|l| CorpusEntry {
            id: format!("{stem}:{}", l.line_no),
            text: l.text,
            session_id: None,
            round: None,
        }));
    }
    Ok(())
}

/// Loads recommendations from a file or a directory tree of `session.json`,
/// `*.jsonl` (`{"id"?, "text"}` per line) and `*.txt` (raw critique
/// output) files. Files are visited in sorted path order.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>, AnalyticsError> {
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    let mut out = Vec::new();
    for f in files {
        load_file(&f, &mut out)?;
    }
    if out.is_empty() {
        return Err(AnalyticsError::EmptyCorpus);
    }
    Ok(out)
}

/// Called with overall progress in `[0, 1]` and the current stage name.
pub type ProgressFn = dyn Fn(f64, &str) + Send + Sync;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub k_range: KRange,
    pub seeds: Vec<u64>,
    /// L2-normalize rows before clustering.
    pub normalize: bool,
    /// Precomputed `id,x,y` coordinates to use instead of PCA.
    pub external_projection: Option<PathBuf>,
    /// Directory for cached embedding matrices.
    pub cache_dir: Option<PathBuf>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            k_range: KRange::default(),
            seeds: (0..5).collect(),
            normalize: false,
            external_projection: None,
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifacts {
    pub report: ClusterReport,
    pub selection: Selection,
    pub projection: Projection2D,
    pub embeddings_path: PathBuf,
    pub clusters_path: PathBuf,
    pub projection_path: PathBuf,
    pub report_path: PathBuf,
}

fn cache_key(embedder: &Embedder, texts: &[String]) -> String {
    let mut buf = serde_json::to_vec(&embedder.descriptor()).unwrap_or_default();
    buf.extend_from_slice(format!("\u{0}{}\u{0}", embedder.dims()).as_bytes());
    for t in texts {
        buf.extend_from_slice(t.as_bytes());
        buf.push(0);
    }
    sha256_hex(&buf)
}

fn embed_cached(
    embedder: &Embedder,
    ids: Vec<String>,
    texts: &[String],
    cache_dir: Option<&Path>,
) -> Result<EmbeddingMatrix, AnalyticsError> {
    let Some(dir) = cache_dir else {
        return embedder.embed(ids, texts);
    };
    let path = dir.join(format!("{}.bin", cache_key(embedder, texts)));
    if let Ok(bytes) = fs::read(&path) {
        match EmbeddingMatrix::read_bin(&bytes[..], ids.clone()) {
            Ok(m) => return Ok(m),
            Err(e) => tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable embedding cache"),
        }
    }
    let matrix = embedder.embed(ids, texts)?;
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    matrix.write_bin(BufWriter::new(fs::File::create(&tmp)?))?;
    fs::rename(&tmp, &path)?;
    Ok(matrix)
}

/// Runs the whole evaluation and writes `embeddings.bin`, `clusters.json`,
/// `projection.csv` and `report.md` into `out_dir`.
pub fn run_eval(
    entries: &[CorpusEntry],
    embedder: &Embedder,
    params: &EvalParams,
    out_dir: &Path,
    progress: Option<&ProgressFn>,
) -> Result<EvalArtifacts, AnalyticsError> {
    let report_progress = |p: f64, stage: &str| {
        if let Some(f) = progress {
            f(p, stage);
        }
    };
    if entries.is_empty() {
        return Err(AnalyticsError::EmptyCorpus);
    }
    if entries.len() < params.k_range.max {
        return Err(AnalyticsError::TooFewRows {
            rows: entries.len(),
            needed: params.k_range.max,
        });
    }
    fs::create_dir_all(out_dir)?;
    report_progress(0.0, "embedding");
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let texts: Vec<String> = entries.iter().map(|e| e.text.clone()).collect();
    let raw = embed_cached(embedder, ids, &texts, params.cache_dir.as_deref())?;
    let embeddings_path = out_dir.join("embeddings.bin");
    let mut w = BufWriter::new(fs::File::create(&embeddings_path)?);
    raw.write_bin(&mut w)?;
    w.flush()?;

    let matrix = if params.normalize { raw.l2_normalized() } else { raw };
    report_progress(0.4, "clustering");
    let selection = select_k(&matrix, params.k_range, &params.seeds)?;
    report_progress(0.9, "reporting");
    let report = build_cluster_report(&matrix, &selection.best, &texts, selection.curve.clone())?;

    let projection = match &params.external_projection {
        Some(p) => read_external_projection(&matrix, fs::File::open(p)?)?,
        None => project_2d(&matrix)?,
    };
    let projection_path = out_dir.join("projection.csv");
    write_projection_csv(&projection, BufWriter::new(fs::File::create(&projection_path)?))?;

    let clusters_path = out_dir.join("clusters.json");
    let rows: Vec<_> = entries
        .iter()
        .zip(&selection.best.assignments)
        .map(|(e, c)| json!({"id": e.id, "cluster": c, "text": e.text}))
        .collect();
    let doc = json!({
        "selected_k": selection.best.k,
        "seed": selection.best.seed,
        "db_score": selection.best.db_score,
        "inertia": selection.best.inertia,
        "normalize": if params.normalize { "cosine" } else { "none" },
        "db_curve": selection.curve,
        "rows": rows,
        "report": report,
    });
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| AnalyticsError::Format(e.to_string()))?;
    text.push('\n');
    fs::write(&clusters_path, text)?;

    let report_path = out_dir.join("report.md");
    fs::write(&report_path, report.to_markdown())?;
    report_progress(1.0, "done");
    Ok(EvalArtifacts {
        report,
        selection,
        projection,
        embeddings_path,
        clusters_path,
        projection_path,
        report_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::analytics::{synthetic::themed_recommendations, EmbedConfig};
    use crate::backend::mock::MockEmbedder;

    #[test]
    fn loads_txt_and_jsonl_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "preamble\n# Add axis labels\n#Use a lighter grid\n").unwrap();
        fs::write(dir.path().join("a.jsonl"), "{\"text\": \"Move the legend\"}\n\n{\"id\": \"x\", \"text\": \"t\"}\n")
            .unwrap();
        let c = load_corpus(dir.path()).unwrap();
        let ids: Vec<&str> = c.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["a:1", "x", "b:2", "b:3"]);
        assert_eq!(c[2].text, "Add axis labels");
    }

    #[test]
    fn empty_directory_is_an_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(AnalyticsError::EmptyCorpus)));
    }

    #[test]
    fn eval_writes_artifacts_and_uses_cache() {
        let entries: Vec<CorpusEntry> = themed_recommendations(6, 2)
            .into_iter()
            .enumerate()
            .map(|(i, (text, _))| CorpusEntry {
                id: format!("r{i}"),
                text,
                session_id: None,
                round: None,
            })
            .collect();
        let out = tempfile::tempdir().unwrap();
        let cache = out.path().join("cache");
        let embedder = Embedder::new(Arc::new(MockEmbedder::new(256)), &EmbedConfig { dims: 256, ..Default::default() });
        let params = EvalParams {
            k_range: KRange::new(2, 12).unwrap(),
            seeds: vec![0, 1],
            cache_dir: Some(cache.clone()),
            ..EvalParams::default()
        };
        let a = run_eval(&entries, &embedder, &params, &out.path().join("one"), None).unwrap();
        assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
        let b = run_eval(&entries, &embedder, &params, &out.path().join("two"), None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.clusters.iter().map(|c| c.size).sum::<usize>(), 60);
        for p in [&a.embeddings_path, &a.clusters_path, &a.projection_path, &a.report_path] {
            assert!(p.exists(), "{}", p.display());
        }
        assert_eq!(fs::read(&a.embeddings_path).unwrap(), fs::read(&b.embeddings_path).unwrap());
    }
}
