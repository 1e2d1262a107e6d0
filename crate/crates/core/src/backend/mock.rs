//! Deterministic in-process backends.
//!
//! These stand in for the chart-to-code model, the critique/edit LLM, and the
//! embedding service so that the whole pipeline runs offline.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::{BackendDescriptor, ChatTransport, EmbeddingTransport, ModelRequest, TransportError};
use crate::critique::CRITIQUE_INSTRUCTION;
use crate::derender::extract_code_block;
use crate::refine::EDIT_ROLE_LINE;
use crate::session::sha256_hex;

pub const BAR_CHART_SCRIPT: &str = include_str!("../../fixtures/scripts/bar_chart.py");
pub const LINE_CHART_SCRIPT: &str = include_str!("../../fixtures/scripts/line_chart.py");
pub const SCATTER_SCRIPT: &str = include_str!("../../fixtures/scripts/scatter.py");
pub const GROUPED_BAR_SCRIPT: &str = include_str!("../../fixtures/scripts/grouped_bar.py");
/// PNG rendered from [`BAR_CHART_SCRIPT`].
pub const BAR_CHART_PNG: &[u8] = include_bytes!("../../fixtures/bar_chart.png");

fn mock_descriptor(model: &str) -> BackendDescriptor {
    BackendDescriptor {
        kind: "mock".into(),
        endpoint_url: None,
        model_name: model.into(),
        style: None,
    }
}

/// Chart-to-code stand-in: maps an image hash to a fixture script.
///
/// Unknown images fall back to one of the built-in scripts chosen by hash,
/// so distinct images still yield varied (but stable) specifications.
#[derive(Debug)]
pub struct MockDerenderer {
    by_hash: HashMap<String, String>,
    fallback: Vec<String>,
    latency: Duration,
}

impl Default for MockDerenderer {
    fn default() -> Self {
        let mut by_hash = HashMap::new();
        by_hash.insert(sha256_hex(BAR_CHART_PNG), BAR_CHART_SCRIPT.to_string());
        MockDerenderer {
            by_hash,
            fallback: [BAR_CHART_SCRIPT, LINE_CHART_SCRIPT, SCATTER_SCRIPT, GROUPED_BAR_SCRIPT]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            latency: Duration::ZERO,
        }
    }
}

impl MockDerenderer {
    pub fn with_fixture(mut self, sha256: impl Into<String>, script: impl Into<String>) -> Self {
        self.by_hash.insert(sha256.into(), script.into());
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn script_for(&self, sha256: &str) -> &str {
        if let Some(s) = self.by_hash.get(sha256) {
            return s;
        }
        let bucket = u64::from_str_radix(&sha256[..sha256.len().min(8)], 16).unwrap_or(0);
        &self.fallback[(bucket % self.fallback.len() as u64) as usize]
    }
}

impl ChatTransport for MockDerenderer {
    fn complete(&self, request: &ModelRequest) -> Result<String, TransportError> {
        thread::sleep(self.latency);
        let image = request
            .image
            .as_ref()
            .ok_or_else(|| TransportError::Status {
                code: 400,
                body: "request has no image".into(),
            })?;
        let script = self.script_for(&sha256_hex(&image.bytes));
        Ok(format!("Here is the reconstructed chart:\n```python\n{script}```\n"))
    }

    fn descriptor(&self) -> BackendDescriptor {
        mock_descriptor("mock-chart2code")
    }
}

struct Rule {
    applies: fn(&str) -> bool,
    issue: &'static str,
}

fn series_count(src: &str) -> usize {
    ["plt.plot(", "ax.plot(", "plt.bar(", "ax.bar(", "plt.scatter(", "ax.scatter("]
        .iter()
        .map(|call| src.matches(call).count())
        .sum()
}

const RULES: &[Rule] = &[
    Rule {
        applies: |s| !s.contains("xlabel"),
        issue: "X-axis has no label describing the plotted variable",
    },
    Rule {
        applies: |s| !s.contains("ylabel"),
        issue: "Y-axis has no label or units",
    },
    Rule {
        applies: |s| !s.contains("title"),
        issue: "Chart lacks a title that states its message",
    },
    Rule {
        applies: |s| s.contains("jet") || s.contains("rainbow"),
        issue: "Rainbow colormap is not colorblind-safe; use a perceptually uniform palette",
    },
    Rule {
        applies: |s| s.contains("'red'") && s.contains("'green'"),
        issue: "Red and green series are hard to distinguish for colorblind readers",
    },
    Rule {
        applies: |s| series_count(s) >= 2 && !s.contains("legend"),
        issue: "Multiple series are shown without a legend",
    },
    Rule {
        applies: |s| s.contains("legend(") && !s.contains("bbox_to_anchor"),
        issue: "Legend overlaps the plot area; move it outside the axes",
    },
    Rule {
        applies: |s| !s.contains("fontsize") && !s.contains("labelsize"),
        issue: "Tick labels use a small font size that hurts readability",
    },
    Rule {
        applies: |s| s.contains("grid(") && !s.contains("alpha"),
        issue: "Heavy gridlines compete with the data marks",
    },
];

/// Rule-based critique in the `#`-per-line format.
pub fn mock_critique(source: &str) -> String {
    let lower = source.to_lowercase();
    let mut lines: Vec<String> = RULES
        .iter()
        .filter(|r| (r.applies)(&lower))
        .map(|r| format!("# {}", r.issue))
        .collect();
    if lines.is_empty() {
        lines.push(if lower.contains("dpi") {
            "# Consider direct labeling instead of relying on color alone".to_string()
        } else {
            "# Figure resolution is low; export at a higher DPI".to_string()
        });
    }
    lines.join("\n") + "\n"
}

/// Applies recognised recommendation texts to a script.
pub fn mock_edit(source: &str, recommendations: &[String]) -> String {
    let mut script = source.trim_end().to_string();
    let mut extra = Vec::new();
    for rec in recommendations {
        let r = rec.to_lowercase();
        if r.contains("x-axis") {
            extra.push("plt.xlabel(\"Category\", fontsize=12)".to_string());
        } else if r.contains("y-axis") {
            extra.push("plt.ylabel(\"Value (units)\", fontsize=12)".to_string());
        } else if r.contains("title") {
            extra.push("plt.title(\"Overview\", fontsize=14)".to_string());
        } else if r.contains("colormap") || r.contains("rainbow") {
            script = script.replace("jet", "viridis").replace("rainbow", "viridis");
        } else if r.contains("red and green") {
            script = script.replace("'red'", "'#0072B2'").replace("'green'", "'#E69F00'");
        } else if r.contains("legend") {
            extra.push("plt.legend(loc=\"upper left\", bbox_to_anchor=(1.02, 1))".to_string());
        } else if r.contains("font size") {
            extra.push("plt.tick_params(labelsize=12)".to_string());
        } else if r.contains("gridlines") {
            extra.push("plt.grid(alpha=0.3)".to_string());
        } else if r.contains("resolution") || r.contains("dpi") {
            extra.push("plt.gcf().set_dpi(150)".to_string());
        } else {
            extra.push(format!("# reviewed: {}", rec.replace('\n', " ")));
        }
    }
    for line in extra {
        script.push('\n');
        script.push_str(&line);
    }
    script.push('\n');
    script
}

/// Numbered list items (`1. text`) that directly follow the edit role line.
fn numbered_items(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .skip_while(|l| !l.trim_start().starts_with(|c: char| c.is_ascii_digit()))
        .map_while(|l| {
            let t = l.trim_start();
            let digits = t.find(|c: char| !c.is_ascii_digit())?;
            (digits > 0 && t[digits..].starts_with(". ")).then(|| t[digits + 2..].trim().to_string())
        })
        .collect()
}

/// Critique/edit LLM stand-in.
///
/// Critique prompts get rule-based findings; edit prompts get the base
/// script with matching fixes appended, inside a fenced block.
#[derive(Debug, Default)]
pub struct MockLlm {
    latency: Duration,
}

impl MockLlm {
    pub fn with_latency(latency: Duration) -> Self {
        MockLlm { latency }
    }
}

impl ChatTransport for MockLlm {
    fn complete(&self, request: &ModelRequest) -> Result<String, TransportError> {
        thread::sleep(self.latency);
        let prompt = &request.prompt;
        if let Some(code) = prompt.strip_prefix(CRITIQUE_INSTRUCTION) {
            return Ok(mock_critique(code));
        }
        if prompt.starts_with(EDIT_ROLE_LINE) {
            let base = extract_code_block(prompt, &[]).map_err(|e| TransportError::Malformed(e.to_string()))?;
            let edited = mock_edit(&base, &numbered_items(prompt));
            return Ok(format!("```python\n{edited}```"));
        }
        Ok("I can only help with chart critique and edits.".into())
    }

    fn descriptor(&self) -> BackendDescriptor {
        mock_descriptor("mock-llm")
    }
}

/// Replays a fixed queue of replies, then delegates to `fallback` (if any).
/// Every request is recorded for later inspection.
#[derive(Debug)]
pub struct ScriptedTransport {
    replies: Mutex<VecDeque<Result<String, TransportError>>>,
    fallback: Option<Box<dyn ChatTransport>>,
    seen: Mutex<Vec<ModelRequest>>,
}

impl ScriptedTransport {
    pub fn new(replies: impl IntoIterator<Item = Result<String, TransportError>>) -> Self {
        ScriptedTransport {
            replies: Mutex::new(replies.into_iter().collect()),
            fallback: None,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn then(mut self, fallback: impl ChatTransport + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }

    pub fn requests(&self) -> Vec<ModelRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatTransport for ScriptedTransport {
    fn complete(&self, request: &ModelRequest) -> Result<String, TransportError> {
        self.seen.lock().unwrap().push(request.clone());
        let next = self.replies.lock().unwrap().pop_front();
        match (next, &self.fallback) {
            (Some(reply), _) => reply,
            (None, Some(f)) => f.complete(request),
            (None, None) => Err(TransportError::Unreachable("scripted replies exhausted".into())),
        }
    }

    fn descriptor(&self) -> BackendDescriptor {
        mock_descriptor("scripted")
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercase alphanumeric tokens, deduplicated.
pub fn token_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Squared weight of the shared component; keeps texts with Jaccard
/// overlap >= 0.6 above cosine 0.8.
const SHARED_WEIGHT_SQ: f32 = 0.5;

/// Bag-of-tokens embedding: coordinate 0 carries a shared component and
/// every token adds mass to one hashed coordinate.
pub fn mock_embedding(text: &str, dims: usize) -> Vec<f32> {
    assert!(dims >= 2, "mock embeddings need at least 2 dimensions");
    let mut v = vec![0f32; dims];
    let mut tokens = token_set(text);
    if tokens.is_empty() {
        tokens.insert(format!("\u{0}{:016x}", fnv1a(text.as_bytes())));
    }
    for t in &tokens {
        let slot = 1 + (fnv1a(t.as_bytes()) % (dims as u64 - 1)) as usize;
        v[slot] += 1.0;
    }
    let scale = (1.0 - SHARED_WEIGHT_SQ).sqrt() / v.iter().map(|x| x * x).sum::<f32>().sqrt();
    for x in &mut v {
        *x *= scale;
    }
    v[0] = SHARED_WEIGHT_SQ.sqrt();
    v
}

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dims: usize,
    latency: Duration,
}

impl MockEmbedder {
    pub fn new(dims: usize) -> Self {
        MockEmbedder {
            dims,
            latency: Duration::ZERO,
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }
}

impl EmbeddingTransport for MockEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError> {
        thread::sleep(self.latency);
        Ok(texts.iter().map(|t| mock_embedding(t, self.dims)).collect())
    }

    fn descriptor(&self) -> BackendDescriptor {
        mock_descriptor(&format!("mock-embedding-{}", self.dims))
    }
}
