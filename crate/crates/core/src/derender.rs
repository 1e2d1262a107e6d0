//! Chart deconstruction: recover a plotting script from a chart image via a
//! chart-to-code model backend.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::backend::{BackendError, ChatTransport, ImagePayload, ModelRequest, RetryPolicy};
use crate::clock::{Clock, SystemClock};
use crate::session::{ChartImage, ChartSpec, SpecOrigin};

pub const DEFAULT_DERENDER_INSTRUCTION: &str = "Convert this chart image into complete, executable Python \
matplotlib code that reproduces it, including the data. Return the code in a single fenced code block.";

/// Substrings that mark unfenced text as plotting code.
pub const DEFAULT_PLOT_TOKENS: &[&str] = &["plt.", "figure(", "subplots(", "ax."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DerenderBackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub instruction: String,
    pub plot_tokens: Vec<String>,
}

impl Default for DerenderBackendConfig {
    fn default() -> Self {
        DerenderBackendConfig {
            endpoint_url: "http://localhost:8000/v1/chat/completions".into(),
            model_name: "chartcoder".into(),
            timeout_s: 120.0,
            max_retries: 2,
            backoff_base_ms: 500,
            instruction: DEFAULT_DERENDER_INSTRUCTION.into(),
            plot_tokens: DEFAULT_PLOT_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl DerenderBackendConfig {
    pub fn validate(&self) -> Result<Url, DerenderError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(DerenderError::Config(format!("timeout_s must be positive, got {}", self.timeout_s)));
        }
        Url::parse(&self.endpoint_url)
            .map_err(|e| DerenderError::Config(format!("endpoint_url {:?}: {e}", self.endpoint_url)))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::new(self.max_retries, Duration::from_millis(self.backoff_base_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerenderResult {
    pub spec: ChartSpec,
    pub model_name: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub raw_completion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DerenderError {
    #[error("invalid de-render configuration: {0}")]
    Config(String),
    #[error("completion contains no extractable plotting code")]
    EmptyCompletion,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("completion contains no extractable plotting code")]
pub struct EmptyCompletion;

impl From<EmptyCompletion> for DerenderError {
    fn from(_: EmptyCompletion) -> Self {
        DerenderError::EmptyCompletion
    }
}

/// Returns the first non-empty fenced code block, or the whole text when it
/// has no fences but contains one of `plot_tokens`.
///
/// A fence is a line starting with three backticks (an info string such as
/// `python` may follow); an unterminated block runs to the end of the text.
pub fn extract_code_block(text: &str, plot_tokens: &[&str]) -> Result<String, EmptyCompletion> {
    let mut lines = text.lines();
    let mut saw_fence = false;
    while let Some(line) = lines.next() {
        if !line.trim_start().starts_with("```") {
            continue;
        }
        saw_fence = true;
        let body: Vec<&str> = lines
            .by_ref()
            .take_while(|l| l.trim() != "```")
            .collect();
        let body = tidy(&body.join("\n"));
        if !body.is_empty() {
            return Ok(body);
        }
    }
    let whole = tidy(text);
    if !saw_fence && !whole.is_empty() && plot_tokens.iter().any(|t| whole.contains(t)) {
        return Ok(whole);
    }
    Err(EmptyCompletion)
}

/// Drops leading blank lines and trailing whitespace; indentation of the
/// first code line is kept.
fn tidy(text: &str) -> String {
    let start = text
        .lines()
        .take_while(|l| l.trim().is_empty())
        .map(|l| l.len() + 1)
        .sum::<usize>()
        .min(text.len());
    text[start..].trim_end().to_string()
}

/// Stage-one driver around a chart-to-code transport.
#[derive(Debug, Clone)]
pub struct Derenderer {
    transport: Arc<dyn ChatTransport>,
    retry: RetryPolicy,
    instruction: String,
    plot_tokens: Vec<String>,
    clock: Arc<dyn Clock>,
}

impl Derenderer {
    pub fn new(transport: Arc<dyn ChatTransport>, cfg: &DerenderBackendConfig) -> Self {
        Derenderer {
            transport,
            retry: cfg.retry_policy(),
            instruction: cfg.instruction.clone(),
            plot_tokens: cfg.plot_tokens.clone(),
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn transport(&self) -> &Arc<dyn ChatTransport> {
        &self.transport
    }

    /// Requests code for `image`. The returned spec is not yet validated.
    pub fn derender(&self, image: &ChartImage) -> Result<DerenderResult, DerenderError> {
        let request = ModelRequest {
            prompt: self.instruction.clone(),
            image: Some(ImagePayload {
                format: image.format,
                bytes: image.bytes.clone(),
            }),
            temperature: None,
        };
        let started = Instant::now();
        let (completion, attempts) = self.retry.run(|| self.transport.complete(&request))?;
        let latency_ms = self.clock.elapsed_ms(started);
        let tokens: Vec<&str> = self.plot_tokens.iter().map(String::as_str).collect();
        let source = extract_code_block(&completion, &tokens)?;
        Ok(DerenderResult {
            spec: ChartSpec::new(source, SpecOrigin::Derendered),
            model_name: self.transport.descriptor().model_name,
            latency_ms,
            attempts,
            raw_completion: completion,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::{MockDerenderer, ScriptedTransport, BAR_CHART_PNG, BAR_CHART_SCRIPT};
    use crate::backend::TransportError;
    use crate::session::DEFAULT_IMAGE_SIZE_CAP;
    use proptest::prelude::*;

    fn fast_cfg(max_retries: u32) -> DerenderBackendConfig {
        DerenderBackendConfig {
            max_retries,
            backoff_base_ms: 1,
            ..Default::default()
        }
    }

    fn bar_image() -> ChartImage {
        ChartImage::from_bytes("img", BAR_CHART_PNG.to_vec(), None, DEFAULT_IMAGE_SIZE_CAP).unwrap()
    }

    #[test]
    fn fence_grammar() {
        assert_eq!(extract_code_block("```python\nx=1\n```", DEFAULT_PLOT_TOKENS).unwrap(), "x=1");
        assert_eq!(extract_code_block("```\nx=1\n```", &[]).unwrap(), "x=1");
        assert_eq!(
            extract_code_block("Sure!\n```py\nplt.plot(1)\n```\nThen:\n```python\nplt.show()\n```", &[]).unwrap(),
            "plt.plot(1)"
        );
        assert_eq!(extract_code_block("no code here", DEFAULT_PLOT_TOKENS), Err(EmptyCompletion));
        assert_eq!(
            extract_code_block("import matplotlib.pyplot as plt\nplt.plot([1])\n", DEFAULT_PLOT_TOKENS).unwrap(),
            "import matplotlib.pyplot as plt\nplt.plot([1])"
        );
        assert_eq!(extract_code_block("```python\n\n```\n", DEFAULT_PLOT_TOKENS), Err(EmptyCompletion));
        assert_eq!(extract_code_block("```python\nplt.plot(1)", &[]).unwrap(), "plt.plot(1)");
    }

    /// Hand-stripped expectations for fenced completions as backends emit them.
    #[test]
    fn fence_stripping_fixture_strings() {
        let cases = [
            ("```python\nimport matplotlib.pyplot as plt\nplt.bar([1],[2])\n```", "import matplotlib.pyplot as plt\nplt.bar([1],[2])"),
            ("Here is the code:\n\n```python\nplt.plot(x)\n```\nHope this helps.", "plt.plot(x)"),
            ("```Python\r\nplt.plot(x)\r\n```\r\n", "plt.plot(x)"),
            ("   ```python\nfor i in range(3):\n    ax.plot(i)\n   ```", "for i in range(3):\n    ax.plot(i)"),
            ("```python\n\n\n    fig = plt.figure()\n```", "    fig = plt.figure()"),
        ];
        for (input, expected) in cases {
            assert_eq!(extract_code_block(input, DEFAULT_PLOT_TOKENS).unwrap(), expected, "input {input:?}");
        }
    }

    #[test]
    fn derender_with_mock_returns_fixture_without_fences() {
        let d = Derenderer::new(Arc::new(MockDerenderer::default()), &fast_cfg(0));
        let r = d.derender(&bar_image()).unwrap();
        assert_eq!(r.spec.source, BAR_CHART_SCRIPT.trim_end());
        assert_eq!(r.spec.origin, SpecOrigin::Derendered);
        assert!(!r.spec.validated);
        assert_eq!(r.attempts, 1);
        assert!(r.raw_completion.contains("```python"));
    }

    #[test]
    fn prose_only_completion_is_empty() {
        let t = ScriptedTransport::new([Ok("I cannot see any chart in this image.".into())]);
        let d = Derenderer::new(Arc::new(t), &fast_cfg(0));
        assert_eq!(d.derender(&bar_image()).unwrap_err(), DerenderError::EmptyCompletion);
    }

    #[test]
    fn retry_count_is_observable() {
        for n in 0..3u32 {
            let mut replies: Vec<Result<String, TransportError>> =
                (0..n).map(|_| Err(TransportError::Status { code: 503, body: String::new() })).collect();
            replies.push(Ok("```python\nplt.plot([1])\n```".into()));
            let d = Derenderer::new(Arc::new(ScriptedTransport::new(replies)), &fast_cfg(3));
            let r = d.derender(&bar_image()).unwrap();
            assert_eq!(r.attempts, n + 1);
        }
    }

    #[test]
    fn timeouts_exhaust_into_backend_timeout() {
        let t = ScriptedTransport::new((0..3).map(|_| Err(TransportError::Timeout)));
        let d = Derenderer::new(Arc::new(t), &fast_cfg(2));
        assert_eq!(
            d.derender(&bar_image()).unwrap_err(),
            DerenderError::Backend(BackendError::Timeout { attempts: 3 })
        );
    }

    #[test]
    fn request_carries_image_and_instruction() {
        let t = Arc::new(ScriptedTransport::new([Ok("```\nplt.plot(1)\n```".into())]));
        let d = Derenderer::new(t.clone(), &fast_cfg(0));
        d.derender(&bar_image()).unwrap();
        let req = &t.requests()[0];
        assert_eq!(req.prompt, DEFAULT_DERENDER_INSTRUCTION);
        assert_eq!(req.image.as_ref().unwrap().bytes, BAR_CHART_PNG);
    }

    #[test]
    fn config_validation() {
        let mut cfg = DerenderBackendConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.timeout_s = 0.0;
        assert!(cfg.validate().is_err());
        cfg.timeout_s = 1.0;
        cfg.endpoint_url = "not a url".into();
        assert!(cfg.validate().is_err());
    }

    proptest! {
        /// Re-extracting an extraction that is plotting code is a no-op.
        #[test]
        fn extraction_is_idempotent(prefix in "[a-zA-Z .:\n]{0,40}", code in "[a-z=0-9 ()\n]{0,60}", fenced in any::<bool>()) {
            let code = format!("plt.plot({code})");
            let text = if fenced { format!("{prefix}\n```python\n{code}\n```\n") } else { format!("{prefix}\n{code}") };
            if let Ok(once) = extract_code_block(&text, DEFAULT_PLOT_TOKENS) {
                let twice = extract_code_block(&once, DEFAULT_PLOT_TOKENS);
                prop_assert_eq!(twice, Ok(once));
            }
        }

        #[test]
        fn extraction_never_panics(text in any::<String>()) {
            let _ = extract_code_block(&text, DEFAULT_PLOT_TOKENS);
        }
    }
}
