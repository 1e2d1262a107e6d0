//! Model backends: one-shot transports plus the retry policy around them.
//!
//! A transport performs exactly one request. [`RetryPolicy`] decides whether
//! a failure is worth repeating (timeouts and 5xx only) and how long to wait.

pub mod http;
pub mod mock;

use std::fmt;
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::session::ImageFormat;

/// What a session records about the backend that served it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: String,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub format: ImageFormat,
    pub bytes: Vec<u8>,
}

impl ImagePayload {
    pub fn data_url(&self) -> String {
        format!(
            "data:{};base64,{}",
            self.format.mime(),
            base64::engine::general_purpose::STANDARD.encode(&self.bytes)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub prompt: String,
    pub image: Option<ImagePayload>,
    pub temperature: Option<f64>,
}

impl ModelRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        ModelRequest {
            prompt: prompt.into(),
            image: None,
            temperature: None,
        }
    }
}

/// Outcome of a single request attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("request timed out")]
    Timeout,
    #[error("backend answered HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Timeout => true,
            TransportError::Status { code, .. } => *code >= 500,
            _ => false,
        }
    }
}

/// Failure after the retry policy gave up.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("backend answered HTTP {code} after {attempts} attempt(s): {body}")]
    Status { code: u16, body: String, attempts: u32 },
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

impl BackendError {
    fn from_transport(err: TransportError, attempts: u32) -> Self {
        match err {
            TransportError::Unreachable(m) => BackendError::Unreachable(m),
            TransportError::Timeout => BackendError::Timeout { attempts },
            TransportError::Status { code, body } => BackendError::Status { code, body, attempts },
            TransportError::Malformed(m) => BackendError::Malformed(m),
        }
    }
}

/// Sends a prompt (optionally with an image) and returns the completion text.
pub trait ChatTransport: Send + Sync + fmt::Debug {
    fn complete(&self, request: &ModelRequest) -> Result<String, TransportError>;
    fn descriptor(&self) -> BackendDescriptor;
    /// Cheap reachability probe for health reporting.
    fn reachable(&self) -> bool {
        true
    }
}

/// Embeds a batch of texts; one vector per input, in order.
pub trait EmbeddingTransport: Send + Sync + fmt::Debug {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError>;
    fn descriptor(&self) -> BackendDescriptor;
    fn reachable(&self) -> bool {
        true
    }
}

/// Exponential backoff applied to transient failures only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            base_delay: Duration::from_millis(500),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    pub fn new(max_retries: u32, base_delay: Duration) -> Self {
        RetryPolicy {
            max_retries,
            base_delay,
            factor: 2,
        }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(retry.saturating_sub(1))
    }

    /// Runs `op` until it succeeds, fails permanently, or retries run out.
    /// Returns the value and the number of attempts made.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, TransportError>) -> Result<(T, u32), BackendError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match op() {
                Ok(v) => return Ok((v, attempts)),
                Err(e) if e.is_transient() && attempts <= self.max_retries => {
                    tracing::debug!(attempt = attempts, error = %e, "transient backend failure, retrying");
                    thread::sleep(self.delay(attempts));
                }
                Err(e) => return Err(BackendError::from_transport(e, attempts)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn fast(max_retries: u32) -> RetryPolicy {
        RetryPolicy::new(max_retries, Duration::from_millis(1))
    }

    #[test]
    fn backoff_doubles_from_base() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay(1), Duration::from_millis(500));
        assert_eq!(p.delay(2), Duration::from_millis(1000));
        assert_eq!(p.delay(3), Duration::from_millis(2000));
    }

    #[test]
    fn transient_failures_then_success_counts_attempts() {
        for n in 0..3u32 {
            let calls = Cell::new(0);
            let (v, attempts) = fast(3)
                .run(|| {
                    calls.set(calls.get() + 1);
                    if calls.get() <= n {
                        Err(TransportError::Timeout)
                    } else {
                        Ok("ok")
                    }
                })
                .unwrap();
            assert_eq!(v, "ok");
            assert_eq!(attempts, n + 1);
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let calls = Cell::new(0);
        let err = fast(5)
            .run::<()>(|| {
                calls.set(calls.get() + 1);
                Err(TransportError::Status {
                    code: 404,
                    body: "no".into(),
                })
            })
            .unwrap_err();
        assert_eq!(calls.get(), 1);
        assert!(matches!(err, BackendError::Status { code: 404, attempts: 1, .. }));
    }

    #[test]
    fn exhaustion_reports_all_attempts() {
        let err = fast(2)
            .run::<()>(|| Err(TransportError::Status { code: 503, body: String::new() }))
            .unwrap_err();
        assert!(matches!(err, BackendError::Status { code: 503, attempts: 3, .. }));
        let err = fast(1).run::<()>(|| Err(TransportError::Timeout)).unwrap_err();
        assert_eq!(err, BackendError::Timeout { attempts: 2 });
    }

    #[test]
    fn unreachable_is_immediate() {
        let err = fast(4)
            .run::<()>(|| Err(TransportError::Unreachable("refused".into())))
            .unwrap_err();
        assert_eq!(err, BackendError::Unreachable("refused".into()));
    }

    #[test]
    fn data_url_is_base64_with_mime() {
        let p = ImagePayload {
            format: ImageFormat::Png,
            bytes: vec![1, 2, 3],
        };
        assert_eq!(p.data_url(), "data:image/png;base64,AQID");
    }
}
