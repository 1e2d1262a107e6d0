//! Interactive refinement: turn user-selected recommendations into a new,
//! render-validated revision, and re-analyze the result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::clock::{Clock, IdSource};
use crate::critique::{dedupe_by, dedupe_key, CritiqueError, CritiqueOutcome, Critic, ParseReport};
use crate::derender::extract_code_block;
use crate::sandbox::{RenderResult, RenderStatus, Sandbox, SandboxError};
use crate::session::{
    ChartSpec, CompletionKind, RecommendationStatus, Session, SessionError, SessionState, SpecOrigin,
};

pub const EDIT_ROLE_LINE: &str = "You are an expert in data visualization and Python plotting code.";
pub const DEFAULT_MAX_EDIT_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub new_spec: ChartSpec,
    pub render: RenderResult,
    pub attempts: u32,
    pub failure_reason: Option<String>,
}

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("no recommendations selected")]
    EmptySelection,
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("session is {0:?}; refinement needs ANALYZED or REFINING")]
    InvalidState(SessionState),
    #[error("session has no revision to edit")]
    NoRevision,
    #[error("latest revision has not rendered successfully")]
    NotValidated,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("edited script failed to render after {} attempt(s): {}", .0.attempts, .0.failure_reason.as_deref().unwrap_or(""))]
    RenderValidationFailed(Box<EditOutcome>),
    #[error(transparent)]
    Critique(#[from] CritiqueError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

/// The edit prompt: role line, numbered selections, the fenced script, and
/// the reply instruction. Deterministic in its inputs.
pub fn build_edit_prompt(base: &ChartSpec, selected: &[&str]) -> Result<String, RefineError> {
    if selected.is_empty() {
        return Err(RefineError::EmptySelection);
    }
    let mut prompt = String::new();
    prompt.push_str(EDIT_ROLE_LINE);
    prompt.push_str("\nApply the following design changes to the chart produced by the script below:\n");
    for (i, text) in selected.iter().enumerate() {
        prompt.push_str(&format!("{}. {}\n", i + 1, text.replace(['\n', '\r'], " ")));
    }
    prompt.push_str("\nCurrent script:\n```python\n");
    prompt.push_str(base.source.trim_end());
    prompt.push_str(
        "\n```\n\nReturn only the complete modified script in a single ```python fenced block, with no explanations.\n",
    );
    Ok(prompt)
}

fn repair_prompt(base_prompt: &str, error: &str) -> String {
    format!(
        "{base_prompt}\nYour previous script failed to render with this error:\n```text\n{}\n```\n\
         Fix the problem and return the complete script.\n",
        error.trim_end()
    )
}

/// Collaborators for one refinement step.
#[derive(Clone, Copy)]
pub struct RefineContext<'a> {
    pub critic: &'a Critic,
    pub sandbox: &'a Sandbox,
    pub clock: &'a dyn Clock,
    pub ids: &'a dyn IdSource,
    pub max_edit_attempts: u32,
}

/// Applies the SELECTED recommendations `selected_ids`.
///
/// On success exactly one revision is appended and every id becomes
/// APPLIED. On any failure the session gains only audit entries.
pub fn apply_recommendations(
    session: &mut Session,
    selected_ids: &[String],
    ctx: RefineContext<'_>,
) -> Result<EditOutcome, RefineError> {
    if !matches!(session.state, SessionState::Analyzed | SessionState::Refining) {
        return Err(RefineError::InvalidState(session.state));
    }
    if selected_ids.is_empty() {
        return Err(RefineError::EmptySelection);
    }
    let mut texts = Vec::with_capacity(selected_ids.len());
    for id in selected_ids {
        let rec = session
            .recommendation(id)
            .ok_or_else(|| SessionError::UnknownRecommendation(id.clone()))?;
        if rec.status != RecommendationStatus::Selected {
            return Err(SessionError::IllegalStatusTransition {
                id: id.clone(),
                from: rec.status,
                to: RecommendationStatus::Applied,
            }
            .into());
        }
        texts.push(rec.text.clone());
    }
    let base = session.latest_revision().ok_or(RefineError::NoRevision)?;
    let base_index = base.index;
    let base_spec = base.spec.clone();
    let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let base_prompt = build_edit_prompt(&base_spec, &text_refs)?;

    let max_attempts = ctx.max_edit_attempts.max(1);
    let mut prompt = base_prompt.clone();
    let mut last: Option<(ChartSpec, RenderResult, String)> = None;
    for attempt in 1..=max_attempts {
        let completion = match ctx.critic.ask(&prompt) {
            Ok((text, _)) => text,
            Err(e) => {
                session.audit(ctx.clock.timestamp(), "apply_failed", format!("attempt {attempt}: {e}"));
                return Err(e.into());
            }
        };
        let (spec, render, reason) = match extract_code_block(&completion, &[]) {
            Err(e) => {
                let reason = format!("{e}");
                let render = RenderResult {
                    status: RenderStatus::OutputMissing,
                    image: None,
                    stderr_excerpt: reason.clone(),
                    duration_ms: 0,
                    svg: None,
                };
                (base_spec.clone(), render, reason)
            }
            Ok(source) => {
                let mut spec = ChartSpec::new(source, SpecOrigin::Edited);
                spec.parent_revision = Some(base_index);
                let render = ctx.sandbox.render(&spec)?;
                if render.is_success() {
                    spec.validated = true;
                    session.append_revision(spec.clone(), selected_ids, Some(render.clone()), ctx.clock.timestamp())?;
                    session.record_completion(CompletionKind::Edit, None, completion, ctx.clock.timestamp());
                    session.state = SessionState::Refining;
                    session.audit(
                        ctx.clock.timestamp(),
                        "applied",
                        format!("revision {} from {} recommendation(s) in {attempt} attempt(s)", base_index + 1, selected_ids.len()),
                    );
                    return Ok(EditOutcome {
                        new_spec: spec,
                        render,
                        attempts: attempt,
                        failure_reason: None,
                    });
                }
                let reason = format!("{:?}: {}", render.status, render.stderr_excerpt);
                (spec, render, reason)
            }
        };
        session.audit(ctx.clock.timestamp(), "edit_attempt_failed", format!("attempt {attempt}: {reason}"));
        prompt = repair_prompt(&base_prompt, &render.stderr_excerpt);
        last = Some((spec, render, reason));
    }
    let (new_spec, render, reason) = last.expect("at least one attempt ran");
    Err(RefineError::RenderValidationFailed(Box::new(EditOutcome {
        new_spec,
        render,
        attempts: max_attempts,
        failure_reason: Some(reason),
    })))
}

/// Summary of one recorded critique round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub report: ParseReport,
    pub added_ids: Vec<String>,
    /// Texts dropped as duplicates within the round or of APPLIED ones.
    pub dropped_duplicates: Vec<String>,
    /// Set when the model produced no parseable recommendation.
    pub warning: Option<String>,
}

/// Stores a critique result as the next round.
///
/// New texts are deduplicated within the round and against recommendations
/// already APPLIED; collisions are logged to the audit trail.
pub fn ingest_round(
    session: &mut Session,
    result: Result<CritiqueOutcome, CritiqueError>,
    clock: &dyn Clock,
    ids: &dyn IdSource,
) -> Result<RoundReport, CritiqueError> {
    let round = session.next_round();
    let (report, raw, warning) = match result {
        Ok(o) => (o.report, o.raw_completion, None),
        Err(CritiqueError::NoRecommendations { report, raw_completion }) => (
            report,
            raw_completion,
            Some("model output contained no #-prefixed recommendation".to_string()),
        ),
        Err(e) => return Err(e),
    };
    session.record_completion(CompletionKind::Critique, Some(round), raw, clock.timestamp());

    let applied_keys: std::collections::HashSet<String> = session
        .recommendations
        .iter()
        .filter(|r| r.status == RecommendationStatus::Applied)
        .map(|r| dedupe_key(&r.text))
        .collect();
    let unique = dedupe_by(report.recommendations.clone(), |l| l.text.as_str());
    let mut dropped: Vec<String> = Vec::new();
    if unique.len() < report.recommendations.len() {
        let kept: std::collections::HashSet<usize> = unique.iter().map(|l| l.line_no).collect();
        dropped.extend(
            report
                .recommendations
                .iter()
                .filter(|l| !kept.contains(&l.line_no))
                .map(|l| l.text.clone()),
        );
    }
    let mut added_ids = Vec::new();
    for line in unique {
        if applied_keys.contains(&dedupe_key(&line.text)) {
            session.audit(
                clock.timestamp(),
                "duplicate_of_applied",
                format!("round {round}: {}", line.text),
            );
            dropped.push(line.text);
            continue;
        }
        let id = ids.next_id();
        session
            .push_recommendation(id.clone(), round, line.text, line.raw_line)
            .expect("parser yields single-line, non-empty texts");
        added_ids.push(id);
    }
    if let Some(w) = &warning {
        session.audit(clock.timestamp(), "no_recommendations", format!("round {round}: {w}"));
    }
    session.state = SessionState::Analyzed;
    Ok(RoundReport {
        round,
        report,
        added_ids,
        dropped_duplicates: dropped,
        warning,
    })
}

/// Critiques the latest (validated) revision as a new round.
pub fn reanalyze(
    session: &mut Session,
    critic: &Critic,
    clock: &dyn Clock,
    ids: &dyn IdSource,
) -> Result<RoundReport, RefineError> {
    let latest = session.latest_revision().ok_or(RefineError::NoRevision)?;
    if !latest.spec.validated {
        return Err(RefineError::NotValidated);
    }
    let spec = latest.spec.clone();
    let result = critic.critique(&spec);
    Ok(ingest_round(session, result, clock, ids)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(lines: usize) -> ChartSpec {
        let src: Vec<String> = (0..lines).map(|i| format!("plt.plot([{i}])")).collect();
        ChartSpec::new(src.join("\n"), SpecOrigin::Derendered)
    }

    #[test]
    fn edit_prompt_embeds_texts_and_full_spec() {
        let base = spec(10);
        let p = build_edit_prompt(&base, &["Add an x label", "Move legend outside"]).unwrap();
        assert!(p.starts_with(EDIT_ROLE_LINE));
        assert!(p.contains("1. Add an x label\n2. Move legend outside\n"));
        assert!(p.contains(&format!("```python\n{}\n```", base.source)));
        assert_eq!(p.matches("Add an x label").count(), 1);
        assert_eq!(p.matches(&base.source).count(), 1);
    }

    #[test]
    fn edit_prompt_is_deterministic() {
        let base = spec(3);
        assert_eq!(
            build_edit_prompt(&base, &["a", "b"]).unwrap(),
            build_edit_prompt(&base, &["a", "b"]).unwrap()
        );
    }

    #[test]
    fn empty_selection_is_rejected() {
        assert!(matches!(build_edit_prompt(&spec(1), &[]), Err(RefineError::EmptySelection)));
    }

    #[test]
    fn edit_prompt_roundtrips_through_code_extraction() {
        let base = spec(4);
        let p = build_edit_prompt(&base, &["x"]).unwrap();
        assert_eq!(extract_code_block(&p, &[]).unwrap(), base.source);
        let r = repair_prompt(&p, "NameError: name 'foo' is not defined");
        assert_eq!(extract_code_block(&r, &[]).unwrap(), base.source);
        assert!(r.contains("NameError"));
    }
}
