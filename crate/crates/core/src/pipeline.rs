//! The end-to-end refinement loop over a session store:
//! upload, analyze (derender + render + critique), apply, re-analyze.
//!
//! Every operation loads the session, mutates it and saves it back. Callers
//! that run operations concurrently must serialize them per session.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{CorpusEntry, EmbedConfig, Embedder};
use crate::backend::http::{HttpChatTransport, HttpEmbeddingTransport};
use crate::backend::mock::{MockDerenderer, MockEmbedder, MockLlm};
use crate::backend::{BackendError, ChatTransport, EmbeddingTransport};
use crate::clock::{Clock, IdSource, RandomIds, SystemClock};
use crate::config::{BackendKind, Config, ConfigError};
use crate::critique::{Critic, CritiqueError};
use crate::derender::{DerenderError, Derenderer};
use crate::refine::{self, EditOutcome, RefineContext, RefineError, RoundReport};
use crate::sandbox::{RenderResult, Sandbox, SandboxError};
use crate::session::{
    ChartImage, ChartSpec, CompletionKind, ImageError, ImageFormat, RecommendationStatus, Session, SessionError,
    SessionState, SessionStore, StoreError,
};

/// Coarse failure class shared by the HTTP service and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    InvalidInput,
    NotFound,
    Conflict,
    Backend,
    Internal,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("recommendation {0} does not belong to this session")]
    UnknownRecommendation(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("chart-to-code backend returned no code")]
    EmptyCompletion,
    #[error("edited script failed to render after {} attempt(s)", .0.attempts)]
    RenderValidationFailed(Box<EditOutcome>),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Image(_) | PipelineError::InvalidInput(_) => ErrorClass::InvalidInput,
            PipelineError::SessionNotFound(_) | PipelineError::UnknownRecommendation(_) => ErrorClass::NotFound,
            PipelineError::Conflict(_) => ErrorClass::Conflict,
            PipelineError::Backend(_) | PipelineError::EmptyCompletion | PipelineError::RenderValidationFailed(_) => {
                ErrorClass::Backend
            }
            PipelineError::Config(_) => ErrorClass::InvalidInput,
            PipelineError::Sandbox(_) | PipelineError::Store(_) | PipelineError::Internal(_) => ErrorClass::Internal,
        }
    }
}

impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(id) => PipelineError::SessionNotFound(id),
            other => PipelineError::Store(other),
        }
    }
}

impl From<SessionError> for PipelineError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::UnknownRecommendation(id) => PipelineError::UnknownRecommendation(id),
            SessionError::IllegalStatusTransition { .. } => PipelineError::Conflict(e.to_string()),
            other => PipelineError::Internal(other.to_string()),
        }
    }
}

impl From<CritiqueError> for PipelineError {
    fn from(e: CritiqueError) -> Self {
        match e {
            CritiqueError::Backend(b) => PipelineError::Backend(b),
            CritiqueError::EmptySpec | CritiqueError::SpecTooLarge { .. } => PipelineError::InvalidInput(e.to_string()),
            CritiqueError::NoRecommendations { .. } => PipelineError::Internal(e.to_string()),
        }
    }
}

impl From<RefineError> for PipelineError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::EmptySelection => PipelineError::InvalidInput(e.to_string()),
            RefineError::Session(s) => s.into(),
            RefineError::InvalidState(_) | RefineError::NoRevision | RefineError::NotValidated => {
                PipelineError::Conflict(e.to_string())
            }
            RefineError::Backend(b) => PipelineError::Backend(b),
            RefineError::RenderValidationFailed(o) => PipelineError::RenderValidationFailed(o),
            RefineError::Critique(c) => c.into(),
            RefineError::Sandbox(s) => PipelineError::Sandbox(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutcome {
    pub session: Session,
    pub round: RoundReport,
    pub render: Option<RenderResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyOutcome {
    pub session: Session,
    pub revision_index: usize,
    pub edit: EditOutcome,
}

/// Everything the pipeline needs, wired by hand or from a [`Config`].
#[derive(Debug, Clone)]
pub struct PipelineParts {
    pub store: SessionStore,
    pub derender: Arc<dyn ChatTransport>,
    pub llm: Arc<dyn ChatTransport>,
    pub sandbox: Sandbox,
    pub clock: Arc<dyn Clock>,
    pub ids: Arc<dyn IdSource>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    store: SessionStore,
    derenderer: Derenderer,
    critic: Critic,
    sandbox: Sandbox,
    clock: Arc<dyn Clock>,
    ids: Arc<dyn IdSource>,
    max_edit_attempts: u32,
    image_size_cap: usize,
}

fn api_key(env_name: &Option<String>) -> Option<String> {
    env_name.as_ref().and_then(|n| std::env::var(n).ok()).filter(|k| !k.is_empty())
}

/// Builds the chart-to-code transport selected by `cfg`.
pub fn derender_transport(cfg: &Config) -> Result<Arc<dyn ChatTransport>, PipelineError> {
    Ok(match cfg.derender.kind {
        BackendKind::Mock => Arc::new(MockDerenderer::default()),
        BackendKind::Http => {
            let url = cfg
                .derender
                .backend
                .validate()
                .map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
            Arc::new(
                HttpChatTransport::new(url, &cfg.derender.backend.model_name, cfg.derender.style, cfg.derender.backend.timeout())
                    .with_api_key(api_key(&cfg.derender.api_key_env)),
            )
        }
    })
}

/// Builds the critique/edit transport selected by `cfg`.
pub fn llm_transport(cfg: &Config) -> Result<Arc<dyn ChatTransport>, PipelineError> {
    Ok(match cfg.critique.kind {
        BackendKind::Mock => Arc::new(MockLlm::default()),
        BackendKind::Http => {
            let b = &cfg.critique.backend;
            let url = b.validate().map_err(PipelineError::InvalidInput)?;
            Arc::new(
                HttpChatTransport::new(url, &b.model_name, b.backend_style, b.timeout())
                    .with_api_key(api_key(&cfg.critique.api_key_env)),
            )
        }
    })
}

/// Builds the embedding backend selected by `cfg`.
pub fn embedder(cfg: &Config) -> Result<Embedder, PipelineError> {
    let e: &EmbedConfig = &cfg.embedding.backend;
    let transport: Arc<dyn EmbeddingTransport> = match cfg.embedding.kind {
        BackendKind::Mock => Arc::new(MockEmbedder::new(e.dims)),
        BackendKind::Http => {
            let url = url::Url::parse(&e.endpoint_url)
                .map_err(|err| PipelineError::InvalidInput(format!("embedding endpoint_url: {err}")))?;
            Arc::new(HttpEmbeddingTransport::new(url, &e.model_name, e.timeout(), api_key(&e.api_key_env)))
        }
    };
    Ok(Embedder::new(transport, e))
}

impl Pipeline {
    pub fn new(parts: PipelineParts, cfg: &Config) -> Self {
        let PipelineParts {
            store,
            derender,
            llm,
            sandbox,
            clock,
            ids,
        } = parts;
        Pipeline {
            store,
            derenderer: Derenderer::new(derender, &cfg.derender.backend).with_clock(clock.clone()),
            critic: Critic::new(llm, &cfg.critique.backend),
            sandbox: sandbox.with_clock(clock.clone()),
            clock,
            ids,
            max_edit_attempts: cfg.critique.max_edit_attempts,
            image_size_cap: cfg.store.image_size_cap_bytes,
        }
    }

    /// Wires real (or mock, per `cfg`) backends with the system clock.
    pub fn from_config(cfg: &Config) -> Result<Self, PipelineError> {
        Self::from_config_with(cfg, Arc::new(SystemClock), Arc::new(RandomIds))
    }

    pub fn from_config_with(cfg: &Config, clock: Arc<dyn Clock>, ids: Arc<dyn IdSource>) -> Result<Self, PipelineError> {
        let parts = PipelineParts {
            store: SessionStore::open(&cfg.store.root)?,
            derender: derender_transport(cfg)?,
            llm: llm_transport(cfg)?,
            sandbox: Sandbox::new(cfg.sandbox.clone())?,
            clock,
            ids,
        };
        Ok(Self::new(parts, cfg))
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn derenderer(&self) -> &Derenderer {
        &self.derenderer
    }

    pub fn image_size_cap(&self) -> usize {
        self.image_size_cap
    }

    pub fn load(&self, id: &str) -> Result<Session, PipelineError> {
        Ok(self.store.load(id)?)
    }

    /// Validates and stores an uploaded chart as a new CREATED session.
    pub fn create_session(&self, bytes: Vec<u8>, declared: Option<ImageFormat>) -> Result<Session, PipelineError> {
        let id = self.ids.next_id();
        let image = ChartImage::from_bytes(id.clone(), bytes, declared, self.image_size_cap)?;
        let mut session = Session::new(id, image, self.clock.timestamp());
        session
            .backend_config_snapshot
            .insert("derender".into(), self.derenderer.transport().descriptor());
        session
            .backend_config_snapshot
            .insert("critique".into(), self.critic.transport().descriptor());
        session.audit(self.clock.timestamp(), "created", format!("{:?} image", session.image.format));
        self.store.save(&session)?;
        Ok(session)
    }

    /// Derenders (if needed), renders revision 0 and records critique round 0.
    pub fn analyze(&self, id: &str) -> Result<AnalyzeOutcome, PipelineError> {
        let mut session = self.store.load(id)?;
        match session.state {
            SessionState::Created | SessionState::Failed if session.revisions.is_empty() => {
                if let Err(e) = self.derender_into(&mut session) {
                    self.store.save(&session)?;
                    return Err(e);
                }
            }
            SessionState::Derendered | SessionState::Failed => {}
            other => {
                return Err(PipelineError::Conflict(format!(
                    "session is {other:?}; analyze needs CREATED, DERENDERED or FAILED"
                )))
            }
        }
        let render = session.latest_revision().and_then(|r| r.render.clone());
        let spec = session.latest_revision().map(|r| r.spec.clone()).expect("derendered session has revision 0");
        let result = self.critic.critique(&spec);
        let round = match refine::ingest_round(&mut session, result, self.clock.as_ref(), self.ids.as_ref()) {
            Ok(r) => r,
            Err(e) => {
                session.audit(self.clock.timestamp(), "critique_failed", e.to_string());
                self.store.save(&session)?;
                return Err(e.into());
            }
        };
        self.store.save(&session)?;
        Ok(AnalyzeOutcome { session, round, render })
    }

    fn derender_into(&self, session: &mut Session) -> Result<(), PipelineError> {
        let derendered = match self.derenderer.derender(&session.image) {
            Ok(d) => d,
            Err(DerenderError::EmptyCompletion) => {
                session.state = SessionState::Failed;
                session.audit(self.clock.timestamp(), "derender_failed", "completion contained no code");
                return Err(PipelineError::EmptyCompletion);
            }
            Err(DerenderError::Backend(b)) => {
                session.audit(self.clock.timestamp(), "derender_failed", b.to_string());
                return Err(b.into());
            }
            Err(DerenderError::Config(c)) => return Err(PipelineError::InvalidInput(c)),
        };
        session.record_completion(CompletionKind::Derender, None, derendered.raw_completion.clone(), self.clock.timestamp());
        let mut spec: ChartSpec = derendered.spec;
        let render = self.sandbox.render(&spec)?;
        spec.validated = render.is_success();
        session.append_revision(spec, &[], Some(render.clone()), self.clock.timestamp())?;
        session.state = SessionState::Derendered;
        session.audit(
            self.clock.timestamp(),
            "derendered",
            format!(
                "{} in {} attempt(s); render {:?}",
                derendered.model_name, derendered.attempts, render.status
            ),
        );
        Ok(())
    }

    /// Applies `rec_ids` (PROPOSED or SELECTED) as one new revision. On
    /// failure only audit entries are persisted; statuses are untouched.
    pub fn apply(&self, id: &str, rec_ids: &[String]) -> Result<ApplyOutcome, PipelineError> {
        if rec_ids.is_empty() {
            return Err(PipelineError::InvalidInput("recommendation_ids must not be empty".into()));
        }
        let original = self.store.load(id)?;
        if !matches!(original.state, SessionState::Analyzed | SessionState::Refining) {
            return Err(PipelineError::Conflict(format!(
                "session is {:?}; apply needs ANALYZED or REFINING",
                original.state
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for rid in rec_ids {
            if !seen.insert(rid) {
                return Err(PipelineError::InvalidInput(format!("recommendation {rid} listed twice")));
            }
            let rec = original
                .recommendation(rid)
                .ok_or_else(|| PipelineError::UnknownRecommendation(rid.clone()))?;
            if !matches!(rec.status, RecommendationStatus::Proposed | RecommendationStatus::Selected) {
                return Err(PipelineError::Conflict(format!("recommendation {rid} is {:?}", rec.status)));
            }
        }
        let mut working = original.clone();
        for rid in rec_ids {
            if working.recommendation(rid).is_some_and(|r| r.status == RecommendationStatus::Proposed) {
                working.set_status(rid, RecommendationStatus::Selected)?;
            }
        }
        let ctx = RefineContext {
            critic: &self.critic,
            sandbox: &self.sandbox,
            clock: self.clock.as_ref(),
            ids: self.ids.as_ref(),
            max_edit_attempts: self.max_edit_attempts,
        };
        match refine::apply_recommendations(&mut working, rec_ids, ctx) {
            Ok(edit) => {
                self.store.save(&working)?;
                Ok(ApplyOutcome {
                    revision_index: working.revisions.len() - 1,
                    session: working,
                    edit,
                })
            }
            Err(e) => {
                let mut kept = original;
                kept.audit_log.extend(working.audit_log.drain(kept.audit_log.len()..));
                self.store.save(&kept)?;
                Err(e.into())
            }
        }
    }

    /// Critiques the latest validated revision as a new round.
    pub fn reanalyze(&self, id: &str) -> Result<AnalyzeOutcome, PipelineError> {
        let mut session = self.store.load(id)?;
        if !matches!(session.state, SessionState::Analyzed | SessionState::Refining) {
            return Err(PipelineError::Conflict(format!(
                "session is {:?}; reanalyze needs ANALYZED or REFINING",
                session.state
            )));
        }
        match refine::reanalyze(&mut session, &self.critic, self.clock.as_ref(), self.ids.as_ref()) {
            Ok(round) => {
                self.store.save(&session)?;
                let render = session.latest_revision().and_then(|r| r.render.clone());
                Ok(AnalyzeOutcome { session, round, render })
            }
            Err(e) => {
                session.audit(self.clock.timestamp(), "reanalyze_failed", e.to_string());
                self.store.save(&session)?;
                Err(e.into())
            }
        }
    }

    /// Marks PROPOSED recommendations DISMISSED.
    pub fn dismiss(&self, id: &str, rec_ids: &[String]) -> Result<Session, PipelineError> {
        if rec_ids.is_empty() {
            return Err(PipelineError::InvalidInput("recommendation_ids must not be empty".into()));
        }
        let mut session = self.store.load(id)?;
        let mut working = session.clone();
        for rid in rec_ids {
            working.set_status(rid, RecommendationStatus::Dismissed)?;
        }
        working.audit(self.clock.timestamp(), "dismissed", rec_ids.join(","));
        session = working;
        self.store.save(&session)?;
        Ok(session)
    }

    /// Derenders and critiques one image without creating a session; used
    /// for corpus evaluation over a directory of charts.
    pub fn recommendations_for_image(&self, name: &str, bytes: Vec<u8>) -> Result<Vec<CorpusEntry>, PipelineError> {
        let image = ChartImage::from_bytes(name, bytes, None, self.image_size_cap)?;
        let spec = match self.derenderer.derender(&image) {
            Ok(d) => d.spec,
            Err(DerenderError::EmptyCompletion) => return Err(PipelineError::EmptyCompletion),
            Err(DerenderError::Backend(b)) => return Err(b.into()),
            Err(DerenderError::Config(c)) => return Err(PipelineError::InvalidInput(c)),
        };
        let report = match self.critic.critique(&spec) {
            Ok(o) => o.report,
            Err(CritiqueError::NoRecommendations { report, .. }) => report,
            Err(e) => return Err(e.into()),
        };
        Ok(crate::critique::dedupe_by(report.recommendations, |l| l.text.as_str())
            .into_iter()
            .map(|l| CorpusEntry {
                id: format!("{name}#{}", l.line_no),
                text: l.text,
                session_id: None,
                round: Some(0),
            })
            .collect())
    }
}
