//! Session endpoints. GETs are idempotent; every POST mutates the session
//! and is not.

use axum::body::Body;
use axum::extract::multipart::MultipartRejection;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use chart_refinery::pipeline::{AnalyzeOutcome, ApplyOutcome};
use chart_refinery::sandbox::RenderStatus;
use chart_refinery::{ChartImage, ImageFormat, Revision, Session, SessionState};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::AppState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub state: SessionState,
    pub created_at: String,
    pub image: ChartImage,
    pub revisions: usize,
    pub recommendations: usize,
}

impl From<&Session> for SessionSummary {
    fn from(s: &Session) -> Self {
        SessionSummary {
            id: s.id.clone(),
            state: s.state,
            created_at: s.created_at.clone(),
            image: s.image.clone(),
            revisions: s.revisions.len(),
            recommendations: s.recommendations.len(),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct RecommendationIds {
    pub recommendation_ids: Vec<String>,
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v).map_err(|e| ApiError::invalid(e.body_text()))
}

/// Runs a blocking pipeline call while holding the session's write lease.
async fn with_lease<T, F>(state: &AppState, id: &str, op: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&chart_refinery::Pipeline) -> Result<T, chart_refinery::PipelineError> + Send + 'static,
{
    if !state.pipeline.store().exists(id) {
        return Err(ApiError::not_found(format!("session {id} not found")));
    }
    let lease = state
        .leases
        .try_acquire(id)
        .ok_or_else(|| ApiError::conflict(format!("another operation on session {id} is in progress")))?;
    let pipeline = state.pipeline.clone();
    tokio::task::spawn_blocking(move || {
        let _lease = lease;
        op(&pipeline)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(ApiError::from)
}

pub async fn list(State(state): State<AppState>) -> Result<Json<Vec<SessionSummary>>, ApiError> {
    let pipeline = state.pipeline.clone();
    let sessions = tokio::task::spawn_blocking(move || -> Result<Vec<SessionSummary>, ApiError> {
        let ids = pipeline.store().list().map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(ids
            .iter()
            .filter_map(|id| pipeline.load(id).ok())
            .map(|s| SessionSummary::from(&s))
            .collect())
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(sessions))
}

pub async fn create(
    State(state): State<AppState>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<(StatusCode, Json<SessionSummary>), ApiError> {
    let mut multipart = multipart.map_err(|e| ApiError::invalid(e.body_text()))?;
    let cap = state.pipeline.image_size_cap();
    let mut upload: Option<(Vec<u8>, Option<ImageFormat>)> = None;
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(ApiError::size_cap(None, cap)),
            Err(e) => return Err(ApiError::invalid(e.body_text())),
        };
        if field.name() != Some("image") {
            continue;
        }
        let declared = field.content_type().and_then(ImageFormat::from_mime);
        let bytes = field.bytes().await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                ApiError::size_cap(None, cap)
            } else {
                ApiError::invalid(e.body_text())
            }
        })?;
        upload = Some((bytes.to_vec(), declared));
    }
    let (bytes, declared) = upload.ok_or_else(|| ApiError::invalid("multipart field `image` is required"))?;
    if bytes.len() > cap {
        return Err(ApiError::size_cap(Some(bytes.len()), cap));
    }
    let pipeline = state.pipeline.clone();
    let session = tokio::task::spawn_blocking(move || pipeline.create_session(bytes, declared))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(SessionSummary::from(&session))))
}

pub async fn get(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    let pipeline = state.pipeline.clone();
    let session = tokio::task::spawn_blocking(move || pipeline.load(&id))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(session))
}

fn analyze_body(o: AnalyzeOutcome) -> Value {
    let spec = o.session.latest_revision().map(|r| r.spec.clone());
    json!({
        "round": o.round.round,
        "report": o.round.report,
        "added_ids": o.round.added_ids,
        "dropped_duplicates": o.round.dropped_duplicates,
        "warning": o.round.warning,
        "spec": spec,
        "render_status": o.render.as_ref().map(|r| r.status),
        "session": o.session,
    })
}

pub async fn analyze(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let sid = id.clone();
    let outcome = with_lease(&state, &id, move |p| p.analyze(&sid)).await?;
    Ok(Json(analyze_body(outcome)))
}

pub async fn reanalyze(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let sid = id.clone();
    let outcome = with_lease(&state, &id, move |p| p.reanalyze(&sid)).await?;
    Ok(Json(analyze_body(outcome)))
}

#[derive(Debug, Serialize)]
struct ApplyBody {
    revision_index: usize,
    render_status: RenderStatus,
    attempts: u32,
    revision: Revision,
    session: Session,
}

impl From<ApplyOutcome> for ApplyBody {
    fn from(o: ApplyOutcome) -> Self {
        ApplyBody {
            revision_index: o.revision_index,
            render_status: o.edit.render.status,
            attempts: o.edit.attempts,
            revision: o.session.revisions[o.revision_index].clone(),
            session: o.session,
        }
    }
}

pub async fn apply(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<RecommendationIds>, JsonRejection>,
) -> Result<Response, ApiError> {
    let ids = json_body(body)?.recommendation_ids;
    if ids.is_empty() {
        return Err(ApiError::invalid("recommendation_ids must not be empty"));
    }
    let sid = id.clone();
    let outcome = with_lease(&state, &id, move |p| p.apply(&sid, &ids)).await?;
    Ok(Json(ApplyBody::from(outcome)).into_response())
}

pub async fn dismiss(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<RecommendationIds>, JsonRejection>,
) -> Result<Json<Session>, ApiError> {
    let ids = json_body(body)?.recommendation_ids;
    let sid = id.clone();
    let session = with_lease(&state, &id, move |p| p.dismiss(&sid, &ids)).await?;
    Ok(Json(session))
}

fn image_response(image: &ChartImage, headers: &HeaderMap) -> Response {
    let etag = format!("\"{}\"", image.sha256);
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    if matches {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag)]).into_response();
    }
    (
        StatusCode::OK,
        [(header::CONTENT_TYPE, image.format.mime().to_string()), (header::ETAG, etag)],
        Body::from(image.bytes.clone()),
    )
        .into_response()
}

pub async fn source_image(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let pipeline = state.pipeline.clone();
    let session = tokio::task::spawn_blocking(move || pipeline.load(&id))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(image_response(&session.image, &headers))
}

pub async fn revision_image(
    State(state): State<AppState>,
    Path((id, n)): Path<(String, usize)>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let pipeline = state.pipeline.clone();
    let session = tokio::task::spawn_blocking(move || pipeline.load(&id))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let image = session
        .revisions
        .get(n)
        .and_then(|r| r.render.as_ref())
        .and_then(|r| r.image.as_ref())
        .ok_or_else(|| ApiError::not_found(format!("revision {n} has no rendered image")))?;
    Ok(image_response(image, &headers))
}
