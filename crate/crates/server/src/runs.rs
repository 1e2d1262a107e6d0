//! Asynchronous clustering runs over a corpus directory or stored sessions.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::Json;
use chart_refinery::analytics::{load_corpus, run_eval, ClusterReport, CorpusEntry, EvalParams, KRange};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::ApiError;
use crate::AppState;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum KRangeInput {
    Text(String),
    Pair([usize; 2]),
}

impl KRangeInput {
    fn resolve(&self) -> Result<KRange, ApiError> {
        match self {
            KRangeInput::Text(s) => s.parse().map_err(ApiError::from),
            KRangeInput::Pair([a, b]) => KRange::new(*a, *b).map_err(ApiError::from),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct RunRequest {
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub session_ids: Option<Vec<String>>,
    #[serde(default)]
    pub k_range: Option<KRangeInput>,
    /// Number of k-means seeds per k.
    #[serde(default)]
    pub seeds: Option<usize>,
    #[serde(default)]
    pub normalize: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPoint {
    pub id: String,
    pub text: String,
    pub cluster: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub id: String,
    pub state: RunState,
    pub progress: f64,
    pub stage: String,
    pub n_rows: usize,
    pub k_range: KRange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ClusterReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

#[derive(Debug)]
struct RunRecord {
    status: RunStatus,
    points: Vec<ClusterPoint>,
}

#[derive(Debug, Clone)]
pub struct Runs {
    records: Arc<Mutex<HashMap<String, RunRecord>>>,
    workers: Arc<Semaphore>,
}

impl Runs {
    pub fn new(workers: usize) -> Self {
        Runs {
            records: Arc::default(),
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    fn status(&self, id: &str) -> Option<RunStatus> {
        self.records.lock().unwrap().get(id).map(|r| r.status.clone())
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut RunRecord)) {
        if let Some(r) = self.records.lock().unwrap().get_mut(id) {
            f(r);
        }
    }
}

fn resolve_corpus(state: &AppState, req: &RunRequest) -> Result<Vec<CorpusEntry>, ApiError> {
    match (&req.corpus_dir, &req.session_ids) {
        (Some(dir), None) => Ok(load_corpus(dir)?),
        (None, Some(ids)) => {
            let mut out = Vec::new();
            for id in ids {
                out.extend(CorpusEntry::from_session(&state.pipeline.load(id)?));
            }
            Ok(out)
        }
        _ => Err(ApiError::invalid("give exactly one of corpus_dir or session_ids")),
    }
}

pub async fn create(
    State(state): State<AppState>,
    body: Result<Json<RunRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let defaults = &state.config.analytics;
    let k_range = match &req.k_range {
        Some(k) => k.resolve()?,
        None => KRange::new(defaults.k_min, defaults.k_max)?,
    };
    let seeds = req.seeds.unwrap_or(defaults.seeds);
    if seeds == 0 {
        return Err(ApiError::invalid("seeds must be positive"));
    }
    let embedder = chart_refinery::pipeline::embedder(&state.config)?;
    let loader_state = state.clone();
    let entries = tokio::task::spawn_blocking(move || resolve_corpus(&loader_state, &req).map(|e| (e, req)))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let (entries, req) = entries;
    if entries.len() < k_range.max {
        return Err(ApiError::invalid(format!(
            "corpus has {} recommendations; k_range max is {}",
            entries.len(),
            k_range.max
        ))
        .with_detail(serde_json::json!({ "rows": entries.len(), "k_max": k_range.max })));
    }

    let id = state.run_ids.next_id();
    let out_dir = state.pipeline.store().root().join("analytics").join(&id);
    let params = EvalParams {
        k_range,
        seeds: (0..seeds as u64).collect(),
        normalize: req.normalize.unwrap_or(defaults.normalize == "cosine"),
        external_projection: None,
        cache_dir: defaults.cache_dir.clone(),
    };
    let status = RunStatus {
        id: id.clone(),
        state: RunState::Queued,
        progress: 0.0,
        stage: "queued".into(),
        n_rows: entries.len(),
        k_range,
        report: None,
        artifacts_dir: None,
        error: None,
    };
    state.runs.records.lock().unwrap().insert(
        id.clone(),
        RunRecord {
            status: status.clone(),
            points: Vec::new(),
        },
    );

    let runs = state.runs.clone();
    let run_id = id.clone();
    tokio::spawn(async move {
        let _permit = runs.workers.clone().acquire_owned().await.expect("semaphore open");
        runs.update(&run_id, |r| {
            r.status.state = RunState::Running;
            r.status.stage = "starting".into();
        });
        let progress_runs = runs.clone();
        let progress_id = run_id.clone();
        let texts: Vec<String> = entries.iter().map(|e| e.text.clone()).collect();
        let result = tokio::task::spawn_blocking(move || {
            let progress = move |p: f64, stage: &str| {
                progress_runs.update(&progress_id, |r| {
                    r.status.progress = p.clamp(0.0, 1.0);
                    r.status.stage = stage.to_string();
                })
            };
            run_eval(&entries, &embedder, &params, &out_dir, Some(&progress)).map(|a| (a, out_dir))
        })
        .await;
        runs.update(&run_id, |r| match result {
            Ok(Ok((art, dir))) => {
                r.points = art
                    .projection
                    .rows
                    .iter()
                    .zip(&art.projection.coords)
                    .zip(&art.selection.best.assignments)
                    .zip(texts)
                    .map(|(((id, xy), &cluster), text)| ClusterPoint {
                        id: id.clone(),
                        text,
                        cluster,
                        x: xy[0],
                        y: xy[1],
                    })
                    .collect();
                r.status.state = RunState::Succeeded;
                r.status.progress = 1.0;
                r.status.stage = "done".into();
                r.status.report = Some(art.report);
                r.status.artifacts_dir = Some(dir);
            }
            Ok(Err(e)) => {
                r.status.state = RunState::Failed;
                r.status.error = Some(ApiError::from(e));
            }
            Err(join) => {
                r.status.state = RunState::Failed;
                r.status.error = Some(ApiError::internal(join.to_string()));
            }
        });
    });

    let location = format!("/api/v1/analytics/runs/{id}");
    Ok((StatusCode::ACCEPTED, [(header::LOCATION, location)], Json(status)))
}

pub async fn get(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<RunStatus>, ApiError> {
    state
        .runs
        .status(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("analytics run {id} not found")))
}

/// Projection coordinates with cluster labels, for scatter plots.
pub async fn points(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Vec<ClusterPoint>>, ApiError> {
    let records = state.runs.records.lock().unwrap();
    let record = records
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("analytics run {id} not found")))?;
    if record.status.state != RunState::Succeeded {
        return Err(ApiError::conflict(format!("analytics run {id} is {:?}", record.status.state)));
    }
    Ok(Json(record.points.clone()))
}
