//! HTTP API for the chart refinement pipeline.
//!
//! Routes live under `/api/v1`. Mutating session routes take a per-session
//! lease; a second concurrent mutation of the same session gets 409.

pub mod error;
pub mod lease;
pub mod runs;
pub mod sessions;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, Method};
use axum::routing::{get, post};
use axum::{Json, Router};
use chart_refinery::{Config, IdSource, Pipeline, RandomIds};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

pub use error::{ApiError, ErrorCode};
pub use lease::Leases;
pub use runs::{ClusterPoint, RunState, RunStatus, Runs};
pub use sessions::SessionSummary;

/// Multipart framing allowance on top of the image size cap.
const MULTIPART_SLACK: usize = 64 * 1024;

#[derive(Debug, Clone)]
pub struct AppState {
    pub pipeline: Pipeline,
    pub config: Arc<Config>,
    pub leases: Leases,
    pub runs: Runs,
    pub run_ids: Arc<dyn IdSource>,
}

impl AppState {
    pub fn new(pipeline: Pipeline, config: Config) -> Self {
        let workers = config.server.analytics_workers;
        AppState {
            pipeline,
            config: Arc::new(config),
            leases: Leases::default(),
            runs: Runs::new(workers),
            run_ids: Arc::new(RandomIds),
        }
    }

    pub fn with_run_ids(mut self, ids: Arc<dyn IdSource>) -> Self {
        self.run_ids = ids;
        self
    }
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    let p = state.pipeline.clone();
    let cfg = state.config.clone();
    let backends = tokio::task::spawn_blocking(move || {
        let derender = p.derenderer().transport();
        let critique = p.critic().transport();
        let embedding = chart_refinery::pipeline::embedder(&cfg).ok();
        json!({
            "derender": { "reachable": derender.reachable(), "descriptor": derender.descriptor() },
            "critique": { "reachable": critique.reachable(), "descriptor": critique.descriptor() },
            "embedding": {
                "reachable": embedding.as_ref().is_some_and(|e| e.reachable()),
                "descriptor": embedding.as_ref().map(|e| e.descriptor()),
            },
            "sandbox": {
                "interpreter": p.sandbox().config().interpreter_path,
                "reachable": p.sandbox().config().interpreter_path.is_file(),
                "network_isolated": p.sandbox().network_isolated(),
            },
        })
    })
    .await
    .unwrap_or(Value::Null);
    Json(json!({ "status": "ok", "backends": backends }))
}

async fn not_found() -> ApiError {
    ApiError::not_found("no such route")
}

async fn method_not_allowed() -> (axum::http::StatusCode, Json<ApiError>) {
    (
        axum::http::StatusCode::METHOD_NOT_ALLOWED,
        Json(ApiError::invalid("method not allowed on this route")),
    )
}

pub fn router(state: AppState) -> Router {
    let body_limit = state.pipeline.image_size_cap() + MULTIPART_SLACK;
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route(
            "/sessions",
            get(sessions::list).post(sessions::create).layer(DefaultBodyLimit::max(body_limit)),
        )
        .route("/sessions/{id}", get(sessions::get))
        .route("/sessions/{id}/image", get(sessions::source_image))
        .route("/sessions/{id}/analyze", post(sessions::analyze))
        .route("/sessions/{id}/apply", post(sessions::apply))
        .route("/sessions/{id}/reanalyze", post(sessions::reanalyze))
        .route("/sessions/{id}/dismiss", post(sessions::dismiss))
        .route("/sessions/{id}/revisions/{n}/image", get(sessions::revision_image))
        .route("/analytics/runs", post(runs::create))
        .route("/analytics/runs/{id}", get(runs::get))
        .route("/analytics/runs/{id}/points", get(runs::points));

    let mut app = Router::new().nest("/api/v1", api);
    if let Some(dir) = &state.config.server.ui_dir {
        app = app.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    let mut app = app
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state.clone());
    if let Some(origin) = state.config.server.cors_origin.as_deref() {
        if let Ok(origin) = HeaderValue::from_str(origin) {
            app = app.layer(
                CorsLayer::new()
                    .allow_origin(origin)
                    .allow_methods([Method::GET, Method::POST])
                    .allow_headers([axum::http::header::CONTENT_TYPE, axum::http::header::IF_NONE_MATCH])
                    .expose_headers([axum::http::header::ETAG, axum::http::header::LOCATION]),
            );
        }
    }
    app
}

/// Binds `config.server.bind` and serves until the process is stopped.
pub async fn serve(state: AppState) -> std::io::Result<()> {
    let addr: SocketAddr = state
        .config
        .server
        .bind
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bind address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
