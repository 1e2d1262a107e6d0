//! Render sandbox: run a plotting script in a separate interpreter process
//! and capture the figure it draws.
//!
//! Each render gets a fresh temporary directory under `workdir_root`, a
//! scrubbed environment, a wall-clock timeout enforced by killing the whole
//! process group, and (when `allow_network` is false and the host supports
//! unprivileged namespaces) no network. The directory is removed before
//! `render` returns.

use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::clock::{Clock, SystemClock};
use crate::session::{sha256_hex, ChartImage, ChartSpec};

/// File the instrumented script writes its figure to.
pub const OUTPUT_FILE: &str = "__output__.png";
pub const SVG_OUTPUT_FILE: &str = "__output__.svg";
pub const CAPTURE_DPI: u32 = 150;
const STDERR_EXCERPT_BYTES: usize = 4096;
const SCRIPT_FILE: &str = "chart_script.py";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureFormat {
    #[default]
    Png,
    /// PNG plus an SVG copy of the same figure.
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub interpreter_path: PathBuf,
    pub timeout_s: f64,
    pub max_output_bytes: u64,
    pub workdir_root: PathBuf,
    pub allow_network: bool,
    pub capture_format: CaptureFormat,
    /// Concurrent render processes allowed.
    pub pool_size: usize,
    /// Used to drop network access when `allow_network` is false.
    pub unshare_path: PathBuf,
    /// Matplotlib config/cache directory shared across renders; defaults to
    /// `<workdir_root>/.mplconfig`.
    pub mpl_config_dir: Option<PathBuf>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            interpreter_path: PathBuf::from("/usr/bin/python3"),
            timeout_s: 20.0,
            max_output_bytes: 20 * 1024 * 1024,
            workdir_root: std::env::temp_dir().join("chart-refinery-sandbox"),
            allow_network: false,
            capture_format: CaptureFormat::Png,
            pool_size: 4,
            unshare_path: PathBuf::from("/usr/bin/unshare"),
            mpl_config_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RenderStatus {
    Success,
    CodeError,
    Timeout,
    OutputMissing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderResult {
    pub status: RenderStatus,
    pub image: Option<ChartImage>,
    pub stderr_excerpt: String,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svg: Option<String>,
}

impl RenderResult {
    pub fn success(image: ChartImage, duration_ms: u64) -> Self {
        RenderResult {
            status: RenderStatus::Success,
            image: Some(image),
            stderr_excerpt: String::new(),
            duration_ms,
            svg: None,
        }
    }

    fn failure(status: RenderStatus, stderr_excerpt: String, duration_ms: u64) -> Self {
        RenderResult {
            status,
            image: None,
            stderr_excerpt,
            duration_ms,
            svg: None,
        }
    }

    pub fn is_success(&self) -> bool {
        self.status == RenderStatus::Success
    }

    pub fn check(&self) -> Result<(), String> {
        let has_image = self.image.as_ref().is_some_and(|i| i.width_px > 0 && i.height_px > 0);
        if (self.status == RenderStatus::Success) != has_image {
            return Err(format!("status {:?} with image present = {has_image}", self.status));
        }
        if self.status == RenderStatus::CodeError && self.stderr_excerpt.is_empty() {
            return Err("CODE_ERROR without stderr excerpt".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox misconfigured: {0}")]
    Misconfigured(String),
}

/// Wraps `source` so that it renders headless and saves its current figure.
pub fn instrument_script(source: &str) -> String {
    instrument_with(source, CaptureFormat::Png)
}

fn instrument_with(source: &str, format: CaptureFormat) -> String {
    let mut out = String::with_capacity(source.len() + 512);
    out.push_str(
        "import matplotlib\n\
         matplotlib.use(\"Agg\")\n\
         import matplotlib.pyplot as plt\n\
         plt.show = lambda *args, **kwargs: None\n\
         # --- begin chart script ---\n",
    );
    out.push_str(source);
    if !source.ends_with('\n') {
        out.push('\n');
    }
    out.push_str("# --- end chart script ---\nimport matplotlib.pyplot as _refinery_plt\n");
    out.push_str(&format!(
        "_refinery_plt.gcf().savefig(\"{OUTPUT_FILE}\", dpi={CAPTURE_DPI})\n"
    ));
    if format == CaptureFormat::Svg {
        out.push_str(&format!("_refinery_plt.gcf().savefig(\"{SVG_OUTPUT_FILE}\")\n"));
    }
    out
}

/// Where and how a render ran; for diagnostics and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderTrace {
    pub workdir: PathBuf,
    pub argv: Vec<String>,
}

#[derive(Debug)]
struct Pool {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Pool);

impl Pool {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct Sandbox {
    cfg: SandboxConfig,
    pool: Arc<Pool>,
    isolate_network: bool,
    clock: Arc<dyn Clock>,
}

impl Sandbox {
    pub fn new(cfg: SandboxConfig) -> Result<Self, SandboxError> {
        if !(cfg.timeout_s > 0.0 && cfg.timeout_s.is_finite()) {
            return Err(SandboxError::Misconfigured(format!("timeout_s must be positive, got {}", cfg.timeout_s)));
        }
        if !cfg.interpreter_path.is_absolute() || !cfg.interpreter_path.is_file() {
            return Err(SandboxError::Misconfigured(format!(
                "interpreter {} is not an existing absolute path",
                cfg.interpreter_path.display()
            )));
        }
        fs::create_dir_all(&cfg.workdir_root).map_err(|e| {
            SandboxError::Misconfigured(format!("workdir_root {}: {e}", cfg.workdir_root.display()))
        })?;
        tempfile::tempfile_in(&cfg.workdir_root).map_err(|e| {
            SandboxError::Misconfigured(format!("workdir_root {} not writable: {e}", cfg.workdir_root.display()))
        })?;
        let isolate_network = !cfg.allow_network && probe_unshare(&cfg);
        if !cfg.allow_network && !isolate_network {
            tracing::warn!("network namespaces unavailable; sandboxed scripts keep network access");
        }
        Ok(Sandbox {
            pool: Arc::new(Pool {
                free: Mutex::new(cfg.pool_size.max(1)),
                cv: Condvar::new(),
            }),
            cfg,
            isolate_network,
            clock: Arc::new(SystemClock),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.cfg
    }

    pub fn network_isolated(&self) -> bool {
        self.isolate_network
    }

    pub fn render(&self, spec: &ChartSpec) -> Result<RenderResult, SandboxError> {
        self.render_with_trace(spec).map(|(r, _)| r)
    }

    pub fn render_with_trace(&self, spec: &ChartSpec) -> Result<(RenderResult, RenderTrace), SandboxError> {
        let _permit = self.pool.acquire();
        let workdir = tempfile::Builder::new()
            .prefix("run-")
            .tempdir_in(&self.cfg.workdir_root)
            .map_err(|e| SandboxError::Misconfigured(format!("cannot create run directory: {e}")))?;
        let dir = workdir.path();
        let script_path = dir.join(SCRIPT_FILE);
        fs::write(&script_path, instrument_with(&spec.source, self.cfg.capture_format))
            .map_err(|e| SandboxError::Misconfigured(format!("cannot write script: {e}")))?;

        let mut argv: Vec<String> = Vec::new();
        if self.isolate_network {
            argv.push(self.cfg.unshare_path.display().to_string());
            argv.push("-rn".into());
        }
        argv.push(self.cfg.interpreter_path.display().to_string());
        argv.push(script_path.display().to_string());

        let stdout = fs::File::create(dir.join("stdout.log"))
            .map_err(|e| SandboxError::Misconfigured(e.to_string()))?;
        let stderr_path = dir.join("stderr.log");
        let stderr = fs::File::create(&stderr_path).map_err(|e| SandboxError::Misconfigured(e.to_string()))?;

        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(dir)
            .env_clear()
            .envs(self.scrubbed_env(dir))
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .process_group(0);

        let started = Instant::now();
        let mut child = cmd
            .spawn()
            .map_err(|e| SandboxError::Misconfigured(format!("cannot start {}: {e}", argv[0])))?;
        let timeout = Duration::from_secs_f64(self.cfg.timeout_s);
        let waited = child.wait_timeout(timeout);
        let result = match waited {
            Ok(Some(status)) => {
                let stderr = read_excerpt(&stderr_path);
                let duration_ms = self.clock.elapsed_ms(started);
                if !status.success() {
                    let excerpt = if stderr.is_empty() {
                        format!("interpreter exited with {status}")
                    } else {
                        stderr
                    };
                    RenderResult::failure(RenderStatus::CodeError, excerpt, duration_ms)
                } else {
                    self.collect_output(dir, stderr, duration_ms)
                }
            }
            Ok(None) | Err(_) => {
                kill_group(&mut child);
                let mut excerpt = read_excerpt(&stderr_path);
                if excerpt.is_empty() {
                    excerpt = format!("render exceeded {} s timeout", self.cfg.timeout_s);
                }
                RenderResult::failure(RenderStatus::Timeout, excerpt, self.clock.elapsed_ms(started))
            }
        };
        let trace = RenderTrace {
            workdir: dir.to_path_buf(),
            argv,
        };
        drop(workdir);
        Ok((result, trace))
    }

    fn collect_output(&self, dir: &Path, stderr: String, duration_ms: u64) -> RenderResult {
        let path = dir.join(OUTPUT_FILE);
        let missing = |why: String| RenderResult::failure(RenderStatus::OutputMissing, why, duration_ms);
        let size = match fs::metadata(&path) {
            Ok(m) => m.len(),
            Err(_) => return missing(format!("{OUTPUT_FILE} was not written\n{stderr}").trim_end().to_string()),
        };
        if size > self.cfg.max_output_bytes {
            return missing(format!("{OUTPUT_FILE} is {size} bytes, over max_output_bytes"));
        }
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => return missing(format!("cannot read {OUTPUT_FILE}: {e}")),
        };
        let id = sha256_hex(&bytes)[..32].to_string();
        let image = match ChartImage::from_bytes(id, bytes, Some(crate::session::ImageFormat::Png), usize::MAX) {
            Ok(img) => img,
            Err(e) => return missing(format!("{OUTPUT_FILE} is not a valid image: {e}")),
        };
        let mut result = RenderResult::success(image, duration_ms);
        result.stderr_excerpt = stderr;
        if self.cfg.capture_format == CaptureFormat::Svg {
            result.svg = fs::read_to_string(dir.join(SVG_OUTPUT_FILE)).ok();
        }
        result
    }

    fn scrubbed_env(&self, dir: &Path) -> Vec<(String, String)> {
        let mpl = self
            .cfg
            .mpl_config_dir
            .clone()
            .unwrap_or_else(|| self.cfg.workdir_root.join(".mplconfig"));
        vec![
            ("PATH".into(), "/usr/local/bin:/usr/bin:/bin".into()),
            ("HOME".into(), dir.display().to_string()),
            ("LANG".into(), "C.UTF-8".into()),
            ("MPLBACKEND".into(), "Agg".into()),
            ("MPLCONFIGDIR".into(), mpl.display().to_string()),
            ("PYTHONDONTWRITEBYTECODE".into(), "1".into()),
            ("PYTHONUNBUFFERED".into(), "1".into()),
        ]
    }
}

fn probe_unshare(cfg: &SandboxConfig) -> bool {
    if !cfg.unshare_path.is_file() {
        return false;
    }
    Command::new(&cfg.unshare_path)
        .args(["-rn"])
        .arg(&cfg.interpreter_path)
        .args(["-c", "pass"])
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .is_ok_and(|s| s.success())
}

fn kill_group(child: &mut std::process::Child) {
    let pid = child.id() as libc::pid_t;
    // SAFETY: plain syscall on a process group we created.
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// The last few KiB of a log file, where a traceback's final error lives.
fn read_excerpt(path: &Path) -> String {
    let mut buf = Vec::with_capacity(STDERR_EXCERPT_BYTES);
    if let Ok(mut f) = fs::File::open(path) {
        let len = f.metadata().map(|m| m.len()).unwrap_or(0);
        let start = len.saturating_sub(STDERR_EXCERPT_BYTES as u64);
        if f.seek(SeekFrom::Start(start)).is_ok() {
            let _ = f.read_to_end(&mut buf);
        }
    }
    let text = String::from_utf8_lossy(&buf);
    text.trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instrumented_script_keeps_source_verbatim() {
        let out = instrument_script("plt.plot([1,2])");
        assert!(out.contains("\nplt.plot([1,2])\n"));
        assert!(out.contains("matplotlib.use(\"Agg\")"));
        assert!(out.trim_end().ends_with("savefig(\"__output__.png\", dpi=150)"));
    }

    #[test]
    fn postamble_follows_existing_savefig() {
        let src = "plt.plot([1])\nplt.savefig('mine.png')\n";
        let out = instrument_script(src);
        let user = out.find("mine.png").unwrap();
        let ours = out.find(OUTPUT_FILE).unwrap();
        assert!(ours > user);
    }

    #[test]
    fn empty_source_is_preamble_and_postamble_only() {
        let out = instrument_script("");
        assert!(out.starts_with("import matplotlib\n"));
        assert!(out.contains(OUTPUT_FILE));
    }

    #[test]
    fn svg_capture_adds_second_save() {
        assert!(instrument_with("x", CaptureFormat::Svg).contains(SVG_OUTPUT_FILE));
        assert!(!instrument_with("x", CaptureFormat::Png).contains(SVG_OUTPUT_FILE));
    }

    #[test]
    fn render_result_invariants() {
        let missing = RenderResult::failure(RenderStatus::OutputMissing, String::new(), 0);
        assert!(missing.check().is_ok());
        let bad = RenderResult::failure(RenderStatus::CodeError, String::new(), 0);
        assert!(bad.check().is_err());
        let mut fake_success = missing.clone();
        fake_success.status = RenderStatus::Success;
        assert!(fake_success.check().is_err());
    }

    #[test]
    fn relative_or_missing_interpreter_is_misconfigured() {
        let dir = tempfile::tempdir().unwrap();
        for interp in ["python3", "/definitely/not/python"] {
            let cfg = SandboxConfig {
                interpreter_path: interp.into(),
                workdir_root: dir.path().to_path_buf(),
                ..Default::default()
            };
            assert!(matches!(Sandbox::new(cfg), Err(SandboxError::Misconfigured(_))));
        }
    }
}
