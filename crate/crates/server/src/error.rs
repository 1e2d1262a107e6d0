use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use chart_refinery::analytics::AnalyticsError;
use chart_refinery::session::ImageError;
use chart_refinery::{ErrorClass, PipelineError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    InvalidInput,
    NotFound,
    Conflict,
    BackendFailure,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::InvalidInput => StatusCode::BAD_REQUEST,
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Conflict => StatusCode::CONFLICT,
            ErrorCode::BackendFailure => StatusCode::BAD_GATEWAY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<ErrorClass> for ErrorCode {
    fn from(c: ErrorClass) -> Self {
        match c {
            ErrorClass::InvalidInput => ErrorCode::InvalidInput,
            ErrorClass::NotFound => ErrorCode::NotFound,
            ErrorClass::Conflict => ErrorCode::Conflict,
            ErrorClass::Backend => ErrorCode::BackendFailure,
            ErrorClass::Internal => ErrorCode::Internal,
        }
    }
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::InvalidInput, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Conflict, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Internal, message)
    }

    pub fn size_cap(size: Option<usize>, cap: usize) -> Self {
        Self::invalid(format!("image exceeds the {cap}-byte cap")).with_detail(json!({ "size": size, "size_cap": cap }))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.code.status(), Json(self)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let code = ErrorCode::from(e.class());
        let detail = match &e {
            PipelineError::Image(ImageError::TooLarge { size, cap }) => Some(json!({ "size": size, "size_cap": cap })),
            PipelineError::RenderValidationFailed(o) => Some(json!({
                "attempts": o.attempts,
                "failure_reason": o.failure_reason,
                "render_status": o.render.status,
                "stderr_excerpt": o.render.stderr_excerpt,
            })),
            PipelineError::Backend(b) => Some(json!({ "backend": b.to_string() })),
            _ => None,
        };
        ApiError {
            code,
            message: e.to_string(),
            detail,
        }
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        match e {
            AnalyticsError::Backend(b) => ApiError::new(ErrorCode::BackendFailure, b.to_string()),
            AnalyticsError::Io(io) => ApiError::internal(io.to_string()),
            other => ApiError::invalid(other.to_string()),
        }
    }
}
