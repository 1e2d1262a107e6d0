use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AnalyticsError, EmbeddingMatrix, DEFAULT_EMBEDDING_DIMS};
use crate::backend::{BackendDescriptor, BackendError, EmbeddingTransport, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub dims: usize,
    pub batch_size: usize,
    /// Requests in flight at once.
    pub parallelism: usize,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            endpoint_url: "https://api.openai.com/v1/embeddings".into(),
            model_name: "text-embedding-3-small".into(),
            dims: DEFAULT_EMBEDDING_DIMS,
            batch_size: 128,
            parallelism: 4,
            timeout_s: 60.0,
            max_retries: 2,
            backoff_base_ms: 500,
            api_key_env: Some("OPENAI_API_KEY".into()),
        }
    }
}

impl EmbedConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::new(self.max_retries, Duration::from_millis(self.backoff_base_ms))
    }
}

/// Batched, bounded-parallel embedding of a corpus.
#[derive(Debug, Clone)]
pub struct Embedder {
    transport: Arc<dyn EmbeddingTransport>,
    dims: usize,
    batch_size: usize,
    parallelism: usize,
    retry: RetryPolicy,
}

impl Embedder {
    pub fn new(transport: Arc<dyn EmbeddingTransport>, cfg: &EmbedConfig) -> Self {
        Embedder {
            transport,
            dims: cfg.dims,
            batch_size: cfg.batch_size.max(1),
            parallelism: cfg.parallelism.max(1),
            retry: cfg.retry_policy(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn descriptor(&self) -> BackendDescriptor {
        self.transport.descriptor()
    }

    pub fn reachable(&self) -> bool {
        self.transport.reachable()
    }

    /// One row per text, in order; every vector must have `dims` entries.
    pub fn embed(&self, ids: Vec<String>, texts: &[String]) -> Result<EmbeddingMatrix, AnalyticsError> {
        if texts.is_empty() {
            return Err(AnalyticsError::EmptyCorpus);
        }
        if ids.len() != texts.len() {
            return Err(AnalyticsError::Format(format!("{} ids for {} texts", ids.len(), texts.len())));
        }
        let batches: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let results: Mutex<Vec<Option<Result<Vec<Vec<f32>>, AnalyticsError>>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let failed = std::sync::atomic::AtomicBool::new(false);
        thread::scope(|scope| {
            for _ in 0..self.parallelism.min(batches.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= batches.len() || failed.load(Ordering::SeqCst) {
                        break;
                    }
                    let r = self.embed_batch(batches[i]);
                    if r.is_err() {
                        failed.store(true, Ordering::SeqCst);
                    }
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        let mut values = Vec::with_capacity(texts.len() * self.dims);
        for r in results.into_inner().unwrap() {
            match r {
                Some(Ok(vectors)) => values.extend(vectors.into_iter().flatten().map(f64::from)),
                Some(Err(e)) => return Err(e),
                None => {}
            }
        }
        EmbeddingMatrix::new(ids, self.dims, values)
    }

    fn embed_batch(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, AnalyticsError> {
        let (vectors, _) = self.retry.run(|| self.transport.embed(batch))?;
        if vectors.len() != batch.len() {
            return Err(AnalyticsError::Backend(BackendError::Malformed(format!(
                "{} embeddings for {} inputs",
                vectors.len(),
                batch.len()
            ))));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != self.dims) {
            return Err(AnalyticsError::DimensionMismatch {
                expected: self.dims,
                got: v.len(),
            });
        }
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockEmbedder;

    fn cfg(batch: usize) -> EmbedConfig {
        EmbedConfig {
            batch_size: batch,
            ..EmbedConfig::default()
        }
    }

    fn texts(n: usize) -> (Vec<String>, Vec<String>) {
        let t: Vec<String> = (0..n).map(|i| format!("recommendation number {i}")).collect();
        ((0..n).map(|i| format!("r{i}")).collect(), t)
    }

    #[test]
    fn mock_embedding_is_deterministic_and_batched() {
        let (ids, t) = texts(300);
        let e = Embedder::new(Arc::new(MockEmbedder::new(1536)), &cfg(7));
        let a = e.embed(ids.clone(), &t).unwrap();
        let b = Embedder::new(Arc::new(MockEmbedder::new(1536)), &cfg(128)).embed(ids, &t).unwrap();
        assert_eq!(a.n_rows(), 300);
        assert_eq!(a.dims(), 1536);
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_texts_get_equal_rows() {
        let t = vec!["same text".to_string(), "same text".to_string(), "other".to_string()];
        let ids = vec!["a".into(), "b".into(), "c".into()];
        let m = Embedder::new(Arc::new(MockEmbedder::new(64)), &EmbedConfig { dims: 64, ..cfg(2) })
            .embed(ids, &t)
            .unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert_ne!(m.row(0), m.row(2));
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let (ids, t) = texts(3);
        let e = Embedder::new(Arc::new(MockEmbedder::new(512)), &cfg(128));
        assert!(matches!(
            e.embed(ids, &t),
            Err(AnalyticsError::DimensionMismatch { expected: 1536, got: 512 })
        ));
    }
}
