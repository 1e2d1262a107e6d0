//! File configuration (TOML or JSON) with environment overrides.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::EmbedConfig;
use crate::backend::http::ChatStyle;
use crate::critique::LlmBackendConfig;
use crate::derender::DerenderBackendConfig;
use crate::refine::DEFAULT_MAX_EDIT_ATTEMPTS;
use crate::sandbox::SandboxConfig;
use crate::session::DEFAULT_IMAGE_SIZE_CAP;

pub const ENV_CONFIG: &str = "CHART_REFINERY_CONFIG";
pub const ENV_DERENDER_URL: &str = "CHART_REFINERY_DERENDER_URL";
pub const ENV_LLM_URL: &str = "CHART_REFINERY_LLM_URL";
pub const ENV_EMBED_URL: &str = "CHART_REFINERY_EMBED_URL";
pub const ENV_INTERPRETER: &str = "CHART_REFINERY_INTERPRETER";
pub const ENV_STORE_ROOT: &str = "CHART_REFINERY_STORE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    #[default]
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub root: PathBuf,
    pub image_size_cap_bytes: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            root: PathBuf::from("./refinery-data"),
            image_size_cap_bytes: DEFAULT_IMAGE_SIZE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DerenderSection {
    pub kind: BackendKind,
    pub style: ChatStyle,
    /// Environment variable holding a bearer token, if any.
    pub api_key_env: Option<String>,
    #[serde(flatten)]
    pub backend: DerenderBackendConfig,
}

impl Default for DerenderSection {
    fn default() -> Self {
        DerenderSection {
            kind: BackendKind::default(),
            style: ChatStyle::OpenaiChat,
            api_key_env: None,
            backend: DerenderBackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CritiqueSection {
    pub kind: BackendKind,
    pub api_key_env: Option<String>,
    /// Edit attempts per apply, counting self-repair retries.
    pub max_edit_attempts: u32,
    #[serde(flatten)]
    pub backend: LlmBackendConfig,
}

impl Default for CritiqueSection {
    fn default() -> Self {
        CritiqueSection {
            kind: BackendKind::default(),
            api_key_env: None,
            max_edit_attempts: DEFAULT_MAX_EDIT_ATTEMPTS,
            backend: LlmBackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSection {
    pub kind: BackendKind,
    #[serde(flatten)]
    pub backend: EmbedConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    /// Origin allowed by CORS; `None` disables cross-origin access.
    pub cors_origin: Option<String>,
    /// Built web UI assets served under `/ui/`.
    pub ui_dir: Option<PathBuf>,
    /// Analytics runs executing at once.
    pub analytics_workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            cors_origin: Some("http://localhost:5173".into()),
            ui_dir: None,
            analytics_workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub seeds: usize,
    /// `none` or `cosine` (L2-normalize rows first).
    pub normalize: String,
    pub cache_dir: Option<PathBuf>,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        AnalyticsConfig {
            k_min: 2,
            k_max: 20,
            seeds: 5,
            normalize: "none".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub store: StoreConfig,
    pub derender: DerenderSection,
    pub critique: CritiqueSection,
    pub embedding: EmbeddingSection,
    pub sandbox: SandboxConfig,
    pub server: ServerConfig,
    pub analytics: AnalyticsConfig,
}

impl Config {
    /// Parses a `.json` file as JSON and anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string()))
        }
    }

    /// Loads `path` (or the file named by `CHART_REFINERY_CONFIG`, or the
    /// defaults) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Config, ConfigError> {
        let env: HashMap<String, String> = std::env::vars().collect();
        Self::load_with_env(path, &env)
    }

    pub fn load_with_env(path: Option<&Path>, env: &HashMap<String, String>) -> Result<Config, ConfigError> {
        let from_env = env.get(ENV_CONFIG).filter(|v| !v.is_empty()).map(PathBuf::from);
        let mut cfg = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => Config::from_file(&p)?,
            None => Config::default(),
        };
        cfg.apply_env(env);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, env: &HashMap<String, String>) {
        let get = |k: &str| env.get(k).filter(|v| !v.is_empty()).cloned();
        if let Some(v) = get(ENV_DERENDER_URL) {
            self.derender.backend.endpoint_url = v;
        }
        if let Some(v) = get(ENV_LLM_URL) {
            self.critique.backend.endpoint_url = v;
        }
        if let Some(v) = get(ENV_EMBED_URL) {
            self.embedding.backend.endpoint_url = v;
        }
        if let Some(v) = get(ENV_INTERPRETER) {
            self.sandbox.interpreter_path = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_STORE_ROOT) {
            self.store.root = PathBuf::from(v);
        }
    }

    /// Switches every model backend to its offline mock.
    pub fn use_mock_backends(&mut self) {
        self.derender.kind = BackendKind::Mock;
        self.critique.kind = BackendKind::Mock;
        self.embedding.kind = BackendKind::Mock;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.derender.kind == BackendKind::Http {
            self.derender.backend.validate().map_err(|e| ConfigError::Invalid(format!("derender: {e}")))?;
        }
        if self.critique.kind == BackendKind::Http {
            self.critique.backend.validate().map_err(|e| ConfigError::Invalid(format!("critique: {e}")))?;
        }
        if self.embedding.kind == BackendKind::Http {
            url::Url::parse(&self.embedding.backend.endpoint_url)
                .map_err(|e| ConfigError::Invalid(format!("embedding endpoint_url: {e}")))?;
        }
        if self.embedding.backend.dims == 0 {
            return Err(ConfigError::Invalid("embedding dims must be positive".into()));
        }
        if !matches!(self.analytics.normalize.as_str(), "none" | "cosine") {
            return Err(ConfigError::Invalid(format!(
                "analytics.normalize must be \"none\" or \"cosine\", got {:?}",
                self.analytics.normalize
            )));
        }
        if self.store.image_size_cap_bytes == 0 {
            return Err(ConfigError::Invalid("store.image_size_cap_bytes must be positive".into()));
        }
        Ok(())
    }
}
