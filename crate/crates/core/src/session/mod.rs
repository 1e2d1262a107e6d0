//! Chart-refinement sessions: the domain model and its on-disk store.
//!
//! A [`Session`] follows one chart through de-rendering, rounds of critique,
//! and the revisions produced by applying selected recommendations.

mod image;
mod store;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendDescriptor;
use crate::sandbox::{RenderResult, RenderStatus};

pub use image::{sha256_hex, ChartImage, ImageError, ImageFormat, DEFAULT_IMAGE_SIZE_CAP};
pub use store::{SessionStore, StoreError, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SpecOrigin {
    Derendered,
    Edited,
    UserSupplied,
}

/// The intermediate representation: a plotting script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub source: String,
    pub origin: SpecOrigin,
    pub parent_revision: Option<usize>,
    pub validated: bool,
}

impl ChartSpec {
    pub fn new(source: impl Into<String>, origin: SpecOrigin) -> Self {
        ChartSpec {
            source: source.into(),
            origin,
            parent_revision: None,
            validated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecommendationStatus {
    Proposed,
    Selected,
    Applied,
    Dismissed,
}

impl RecommendationStatus {
    pub fn can_transition_to(self, to: RecommendationStatus) -> bool {
        use RecommendationStatus::*;
        matches!(
            (self, to),
            (Proposed, Selected) | (Proposed, Dismissed) | (Selected, Applied)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recommendation {
    pub id: String,
    pub session_id: String,
    pub round: u32,
    pub text: String,
    pub raw_line: String,
    pub status: RecommendationStatus,
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub index: usize,
    pub spec: ChartSpec,
    pub applied_recommendation_ids: Vec<String>,
    pub render: Option<RenderResult>,
    pub created_at: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Created,
    Derendered,
    Analyzed,
    Refining,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionKind {
    Derender,
    Critique,
    Edit,
}

/// A model completion kept verbatim for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub kind: CompletionKind,
    pub round: Option<u32>,
    pub text: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: String,
    pub event: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub created_at: String,
    pub image: ChartImage,
    pub state: SessionState,
    pub revisions: Vec<Revision>,
    pub recommendations: Vec<Recommendation>,
    pub backend_config_snapshot: BTreeMap<String, BackendDescriptor>,
    #[serde(default)]
    pub raw_completions: Vec<RawCompletion>,
    #[serde(default)]
    pub audit_log: Vec<AuditEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("unknown recommendation {0}")]
    UnknownRecommendation(String),
    #[error("recommendation {id} cannot move from {from:?} to {to:?}")]
    IllegalStatusTransition {
        id: String,
        from: RecommendationStatus,
        to: RecommendationStatus,
    },
    #[error("invalid recommendation text: {0:?}")]
    InvalidRecommendationText(String),
    #[error("session invariant violated: {0}")]
    Invariant(String),
}

impl Session {
    pub fn new(id: impl Into<String>, image: ChartImage, created_at: impl Into<String>) -> Self {
        Session {
            id: id.into(),
            created_at: created_at.into(),
            image,
            state: SessionState::Created,
            revisions: Vec::new(),
            recommendations: Vec::new(),
            backend_config_snapshot: BTreeMap::new(),
            raw_completions: Vec::new(),
            audit_log: Vec::new(),
        }
    }

    pub fn latest_revision(&self) -> Option<&Revision> {
        self.revisions.last()
    }

    pub fn recommendation(&self, id: &str) -> Option<&Recommendation> {
        self.recommendations.iter().find(|r| r.id == id)
    }

    /// Highest critique round recorded, counting rounds that yielded no
    /// recommendations.
    pub fn max_round(&self) -> Option<u32> {
        let from_recs = self.recommendations.iter().map(|r| r.round);
        let from_raw = self
            .raw_completions
            .iter()
            .filter(|c| c.kind == CompletionKind::Critique)
            .filter_map(|c| c.round);
        from_recs.chain(from_raw).max()
    }

    pub fn next_round(&self) -> u32 {
        self.max_round().map_or(0, |r| r + 1)
    }

    pub fn round(&self, round: u32) -> impl Iterator<Item = &Recommendation> {
        self.recommendations.iter().filter(move |r| r.round == round)
    }

    /// Moves a recommendation along the status machine. APPLIED is only
    /// reachable through [`Session::append_revision`].
    pub fn set_status(&mut self, id: &str, to: RecommendationStatus) -> Result<(), SessionError> {
        let rec = self
            .recommendations
            .iter_mut()
            .find(|r| r.id == id)
            .ok_or_else(|| SessionError::UnknownRecommendation(id.to_string()))?;
        if !rec.status.can_transition_to(to) || to == RecommendationStatus::Applied {
            return Err(SessionError::IllegalStatusTransition {
                id: id.to_string(),
                from: rec.status,
                to,
            });
        }
        rec.status = to;
        Ok(())
    }

    /// Appends a PROPOSED recommendation to `round`.
    pub fn push_recommendation(
        &mut self,
        id: impl Into<String>,
        round: u32,
        text: impl Into<String>,
        raw_line: impl Into<String>,
    ) -> Result<&Recommendation, SessionError> {
        let text = text.into();
        if text.trim().is_empty() || text.contains(['\n', '\r']) {
            return Err(SessionError::InvalidRecommendationText(text));
        }
        self.recommendations.push(Recommendation {
            id: id.into(),
            session_id: self.id.clone(),
            round,
            text,
            raw_line: raw_line.into(),
            status: RecommendationStatus::Proposed,
            category: None,
        });
        Ok(self.recommendations.last().expect("just pushed"))
    }

    /// Appends the next revision and marks `applied_ids` APPLIED.
    ///
    /// Every id must exist and be SELECTED; nothing is modified on error.
    pub fn append_revision(
        &mut self,
        mut spec: ChartSpec,
        applied_ids: &[String],
        render: Option<RenderResult>,
        created_at: impl Into<String>,
    ) -> Result<&Revision, SessionError> {
        for id in applied_ids {
            let rec = self
                .recommendation(id)
                .ok_or_else(|| SessionError::UnknownRecommendation(id.clone()))?;
            if rec.status != RecommendationStatus::Selected {
                return Err(SessionError::IllegalStatusTransition {
                    id: id.clone(),
                    from: rec.status,
                    to: RecommendationStatus::Applied,
                });
            }
        }
        let unique: HashSet<&String> = applied_ids.iter().collect();
        if unique.len() != applied_ids.len() {
            return Err(SessionError::Invariant("duplicate applied recommendation id".into()));
        }
        let index = self.revisions.len();
        if index == 0 && !applied_ids.is_empty() {
            return Err(SessionError::Invariant(
                "revision 0 cannot apply recommendations".into(),
            ));
        }
        if spec.source.trim().is_empty() {
            return Err(SessionError::Invariant("spec source is empty".into()));
        }
        let rendered_ok = render.as_ref().is_some_and(|r| r.status == RenderStatus::Success);
        spec.validated = spec.validated && rendered_ok;
        for rec in self.recommendations.iter_mut().filter(|r| applied_ids.contains(&r.id)) {
            rec.status = RecommendationStatus::Applied;
        }
        self.revisions.push(Revision {
            index,
            spec,
            applied_recommendation_ids: applied_ids.to_vec(),
            render,
            created_at: created_at.into(),
        });
        Ok(self.revisions.last().expect("just pushed"))
    }

    pub fn record_completion(
        &mut self,
        kind: CompletionKind,
        round: Option<u32>,
        text: impl Into<String>,
        created_at: impl Into<String>,
    ) {
        self.raw_completions.push(RawCompletion {
            kind,
            round,
            text: text.into(),
            created_at: created_at.into(),
        });
    }

    pub fn audit(&mut self, at: impl Into<String>, event: impl Into<String>, detail: impl Into<String>) {
        self.audit_log.push(AuditEntry {
            at: at.into(),
            event: event.into(),
            detail: detail.into(),
        });
    }

    /// Checks every structural invariant of the session.
    ///
    /// Image payload checks only run when the payload is attached.
    pub fn check_invariants(&self) -> Result<(), SessionError> {
        let fail = |msg: String| Err(SessionError::Invariant(msg));

        if !self.image.bytes.is_empty() {
            if let Err(e) = self.image.verify() {
                return fail(format!("source image: {e}"));
            }
        }

        let mut by_id: HashMap<&str, &Recommendation> = HashMap::new();
        for rec in &self.recommendations {
            if by_id.insert(rec.id.as_str(), rec).is_some() {
                return fail(format!("duplicate recommendation id {}", rec.id));
            }
            if rec.session_id != self.id {
                return fail(format!("recommendation {} belongs to {}", rec.id, rec.session_id));
            }
            if rec.text.trim().is_empty() || rec.text.contains(['\n', '\r']) {
                return fail(format!("recommendation {} has invalid text", rec.id));
            }
        }

        let mut applied: HashSet<&str> = HashSet::new();
        for (pos, rev) in self.revisions.iter().enumerate() {
            if rev.index != pos {
                return fail(format!("revision at position {pos} has index {}", rev.index));
            }
            if pos == 0 && !rev.applied_recommendation_ids.is_empty() {
                return fail("revision 0 applies recommendations".into());
            }
            if rev.spec.source.trim().is_empty() {
                return fail(format!("revision {pos} has an empty spec"));
            }
            let rendered_ok = rev
                .render
                .as_ref()
                .is_some_and(|r| r.status == RenderStatus::Success);
            if rev.spec.validated && !rendered_ok {
                return fail(format!("revision {pos} is validated without a successful render"));
            }
            if let Some(render) = &rev.render {
                if let Err(msg) = render.check() {
                    return fail(format!("revision {pos} render: {msg}"));
                }
                if let Some(img) = &render.image {
                    if !img.bytes.is_empty() {
                        if let Err(e) = img.verify() {
                            return fail(format!("revision {pos} render image: {e}"));
                        }
                    }
                }
            }
            for id in &rev.applied_recommendation_ids {
                match by_id.get(id.as_str()) {
                    None => return fail(format!("revision {pos} applies unknown {id}")),
                    Some(rec) if rec.status != RecommendationStatus::Applied => {
                        return fail(format!("revision {pos} applies {id} which is {:?}", rec.status))
                    }
                    Some(_) => {}
                }
                if !applied.insert(id.as_str()) {
                    return fail(format!("{id} applied twice"));
                }
            }
        }
        for rec in &self.recommendations {
            if rec.status == RecommendationStatus::Applied && !applied.contains(rec.id.as_str()) {
                return fail(format!("{} is APPLIED but no revision applies it", rec.id));
            }
        }

        if self.state == SessionState::Analyzed && self.max_round().is_none() {
            return fail("ANALYZED session has no recommendation round".into());
        }
        if matches!(self.state, SessionState::Analyzed | SessionState::Refining | SessionState::Derendered)
            && self.revisions.is_empty()
        {
            return fail(format!("{:?} session has no revisions", self.state));
        }
        Ok(())
    }
}
