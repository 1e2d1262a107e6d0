//! Recommended updates: prompt a chat model with the chart script and parse
//! its `#`-prefixed one-line issues.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::backend::http::ChatStyle;
use crate::backend::{BackendError, ChatTransport, ModelRequest, RetryPolicy};
use crate::session::{ChartSpec, Recommendation};

/// The critique instruction, sent verbatim ahead of the script.
pub const CRITIQUE_INSTRUCTION: &str = "You are an expert in data visualization. Analyze the chart produced by the \
following Python code. Identify all visual design issues\u{2014}ignore any coding or technical errors. List each \
issue clearly and concisely, using exactly one line per issue. Each line must begin with #, and there should be no \
enumeration, explanations, or extra formatting.";

pub const DEFAULT_MAX_PROMPT_CHARS: usize = 32_000;
pub const DEFAULT_ROUND_CAP: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmBackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub backend_style: ChatStyle,
    pub temperature: f64,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Cap on the script length accepted into a prompt, in characters.
    pub max_prompt_chars: usize,
    /// Recommendations kept per round; the rest are skipped as OVER_CAP.
    pub per_round_cap: usize,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        LlmBackendConfig {
            endpoint_url: "http://localhost:11434/api/generate".into(),
            model_name: "gpt-oss:20b".into(),
            backend_style: ChatStyle::Ollama,
            temperature: 0.2,
            timeout_s: 300.0,
            max_retries: 2,
            backoff_base_ms: 500,
            max_prompt_chars: DEFAULT_MAX_PROMPT_CHARS,
            per_round_cap: DEFAULT_ROUND_CAP,
        }
    }
}

impl LlmBackendConfig {
    pub fn validate(&self) -> Result<Url, String> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(format!("timeout_s must be positive, got {}", self.timeout_s));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature must lie in [0, 2], got {}", self.temperature));
        }
        Url::parse(&self.endpoint_url).map_err(|e| format!("endpoint_url {:?}: {e}", self.endpoint_url))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::new(self.max_retries, Duration::from_millis(self.backoff_base_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiquePrompt {
    pub instruction: String,
    pub spec_source: String,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CritiqueError {
    #[error("spec source is empty")]
    EmptySpec,
    #[error("spec is {len} characters, over the {cap}-character prompt cap")]
    SpecTooLarge { len: usize, cap: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("completion contained no parseable recommendation")]
    NoRecommendations { report: ParseReport, raw_completion: String },
}

/// Builds the critique prompt: instruction, one blank line, the script.
pub fn build_critique_prompt(spec: &ChartSpec, max_chars: usize) -> Result<CritiquePrompt, CritiqueError> {
    if spec.source.trim().is_empty() {
        return Err(CritiqueError::EmptySpec);
    }
    let len = spec.source.chars().count();
    if len > max_chars {
        return Err(CritiqueError::SpecTooLarge { len, cap: max_chars });
    }
    Ok(CritiquePrompt {
        instruction: CRITIQUE_INSTRUCTION.to_string(),
        spec_source: spec.source.clone(),
        rendered: format!("{CRITIQUE_INSTRUCTION}\n\n{}", spec.source),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SkipReason {
    Blank,
    NotHashPrefixed,
    EmptyAfterHash,
    OverCap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedLine {
    pub line_no: usize,
    pub text: String,
    pub raw_line: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line_no: usize,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub recommendations: Vec<ParsedLine>,
    pub skipped_lines: Vec<SkippedLine>,
    pub total_lines: usize,
}

impl ParseReport {
    pub fn texts(&self) -> Vec<&str> {
        self.recommendations.iter().map(|r| r.text.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.recommendations.is_empty()
    }

    /// Keeps the first `cap` recommendations; the rest become OVER_CAP skips.
    pub fn apply_cap(mut self, cap: usize) -> Self {
        if self.recommendations.len() > cap {
            for line in self.recommendations.split_off(cap) {
                self.skipped_lines.push(SkippedLine {
                    line_no: line.line_no,
                    reason: SkipReason::OverCap,
                });
            }
            self.skipped_lines.sort_by_key(|s| s.line_no);
        }
        self
    }
}

const LINE_BREAKS: &[char] = &['\n', '\r', '\u{0B}', '\u{0C}', '\u{85}', '\u{2028}', '\u{2029}'];

/// Strips `12.`, `3)` or `-` list markers.
fn strip_enumeration(line: &str) -> &str {
    if let Some(rest) = line.strip_prefix('-') {
        return rest.trim_start();
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            return rest.trim_start();
        }
    }
    line
}

/// Parses a completion into recommendation lines. Never fails.
///
/// A line counts when, after leading whitespace and an optional list
/// marker, it starts with `#`; the text is what follows the `#` run.
pub fn parse_recommendations(completion: &str) -> ParseReport {
    let normalized = completion.replace("\r\n", "\n");
    let mut segments: Vec<&str> = normalized.split(LINE_BREAKS).collect();
    if segments.last() == Some(&"") {
        segments.pop();
    }
    let mut report = ParseReport {
        total_lines: segments.len(),
        ..Default::default()
    };
    for (i, raw) in segments.into_iter().enumerate() {
        let line_no = i + 1;
        let trimmed = raw.trim_start();
        if trimmed.trim_end().is_empty() {
            report.skipped_lines.push(SkippedLine {
                line_no,
                reason: SkipReason::Blank,
            });
            continue;
        }
        let Some(after_hash) = strip_enumeration(trimmed).strip_prefix('#') else {
            report.skipped_lines.push(SkippedLine {
                line_no,
                reason: SkipReason::NotHashPrefixed,
            });
            continue;
        };
        let text = after_hash.trim_start_matches('#').trim();
        if text.is_empty() {
            report.skipped_lines.push(SkippedLine {
                line_no,
                reason: SkipReason::EmptyAfterHash,
            });
            continue;
        }
        report.recommendations.push(ParsedLine {
            line_no,
            text: text.to_string(),
            raw_line: raw.to_string(),
        });
    }
    report
}

/// Normalization key used for duplicate detection.
pub fn dedupe_key(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || matches!(c, '\u{2026}' | '\u{3002}') || c.is_whitespace())
        .to_string()
}

/// Stable dedup keyed by [`dedupe_key`] of `text(item)`; first occurrence wins.
pub fn dedupe_by<T>(items: Vec<T>, text: impl Fn(&T) -> &str) -> Vec<T> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|item| seen.insert(dedupe_key(text(item))))
        .collect()
}

pub fn dedupe(recs: Vec<Recommendation>) -> Vec<Recommendation> {
    dedupe_by(recs, |r| r.text.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CritiqueOutcome {
    pub report: ParseReport,
    pub raw_completion: String,
    pub attempts: u32,
}

/// Stage-two driver around a chat transport.
#[derive(Debug, Clone)]
pub struct Critic {
    transport: Arc<dyn ChatTransport>,
    retry: RetryPolicy,
    temperature: f64,
    max_prompt_chars: usize,
    per_round_cap: usize,
}

impl Critic {
    pub fn new(transport: Arc<dyn ChatTransport>, cfg: &LlmBackendConfig) -> Self {
        Critic {
            transport,
            retry: cfg.retry_policy(),
            temperature: cfg.temperature,
            max_prompt_chars: cfg.max_prompt_chars,
            per_round_cap: cfg.per_round_cap,
        }
    }

    pub fn transport(&self) -> &Arc<dyn ChatTransport> {
        &self.transport
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    /// Sends `prompt` with the critique temperature; returns text and attempts.
    pub fn ask(&self, prompt: &str) -> Result<(String, u32), BackendError> {
        let request = ModelRequest {
            prompt: prompt.to_string(),
            image: None,
            temperature: Some(self.temperature),
        };
        self.retry.run(|| self.transport.complete(&request))
    }

    /// Critiques `spec`. Zero parseable lines yields
    /// [`CritiqueError::NoRecommendations`], which still carries the raw text.
    pub fn critique(&self, spec: &ChartSpec) -> Result<CritiqueOutcome, CritiqueError> {
        let prompt = build_critique_prompt(spec, self.max_prompt_chars)?;
        let (raw_completion, attempts) = self.ask(&prompt.rendered)?;
        let report = parse_recommendations(&raw_completion).apply_cap(self.per_round_cap);
        if report.is_empty() {
            return Err(CritiqueError::NoRecommendations { report, raw_completion });
        }
        Ok(CritiqueOutcome {
            report,
            raw_completion,
            attempts,
        })
    }
}
