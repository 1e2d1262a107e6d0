use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use chart_refinery::backend::mock::{mock_critique, MockDerenderer, MockLlm, ScriptedTransport, BAR_CHART_PNG, BAR_CHART_SCRIPT};
use chart_refinery::backend::ChatTransport;
use chart_refinery::pipeline::{ErrorClass, PipelineParts};
use chart_refinery::sandbox::Sandbox;
use chart_refinery::{
    Config, FixedClock, Pipeline, PipelineError, RecommendationStatus, SequentialIds, SessionState, SessionStore,
};

fn mock_config(root: &Path) -> Config {
    let mut cfg = Config::default();
    cfg.use_mock_backends();
    cfg.store.root = root.join("store");
    cfg.sandbox.workdir_root = root.join("work");
    cfg
}

fn mock_pipeline(root: &Path) -> Pipeline {
    Pipeline::from_config_with(&mock_config(root), Arc::new(FixedClock::epoch()), Arc::new(SequentialIds::new())).unwrap()
}

fn scripted_pipeline(root: &Path, derender: Arc<dyn ChatTransport>, llm: Arc<dyn ChatTransport>) -> Pipeline {
    let cfg = mock_config(root);
    let parts = PipelineParts {
        store: SessionStore::open(&cfg.store.root).unwrap(),
        derender,
        llm,
        sandbox: Sandbox::new(cfg.sandbox.clone()).unwrap(),
        clock: Arc::new(FixedClock::epoch()),
        ids: Arc::new(SequentialIds::new()),
    };
    Pipeline::new(parts, &cfg)
}

#[test]
fn upload_analyze_apply_reanalyze_loop() {
    let dir = tempfile::tempdir().unwrap();
    let p = mock_pipeline(dir.path());
    let started = Instant::now();

    let s = p.create_session(BAR_CHART_PNG.to_vec(), None).unwrap();
    assert_eq!(s.state, SessionState::Created);

    let analyzed = p.analyze(&s.id).unwrap();
    assert_eq!(analyzed.session.state, SessionState::Analyzed);
    assert_eq!(analyzed.round.round, 0);
    assert!(analyzed.render.as_ref().unwrap().is_success());
    let round0: Vec<String> = analyzed.session.round(0).map(|r| r.id.clone()).collect();
    assert!(round0.len() >= 2, "{round0:?}");

    let chosen = round0[..2].to_vec();
    let applied = p.apply(&s.id, &chosen).unwrap();
    assert_eq!(applied.revision_index, 1);
    assert_eq!(applied.session.state, SessionState::Refining);
    assert!(applied.edit.render.is_success());

    let re = p.reanalyze(&s.id).unwrap();
    assert_eq!(re.round.round, 1);
    let elapsed = started.elapsed().as_secs_f64();

    let stored = p.load(&s.id).unwrap();
    let indices: Vec<usize> = stored.revisions.iter().map(|r| r.index).collect();
    assert_eq!(indices, vec![0, 1]);
    assert_eq!(stored.revisions[1].applied_recommendation_ids, chosen);
    assert_eq!(stored.revisions[1].spec.parent_revision, Some(0));
    assert!(stored.round(1).count() >= 1);
    for id in &chosen {
        assert_eq!(stored.recommendation(id).unwrap().status, RecommendationStatus::Applied);
    }
    // Applied fixes are not proposed again.
    let applied_texts: Vec<&str> = chosen.iter().map(|id| stored.recommendation(id).unwrap().text.as_str()).collect();
    assert!(stored.round(1).all(|r| !applied_texts.contains(&r.text.as_str())));
    stored.check_invariants().unwrap();
    assert!(elapsed < 10.0, "loop took {elapsed:.2} s");
}

#[test]
fn failed_edit_leaves_statuses_and_revisions_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let broken = "```python\nraise RuntimeError('broken edit')\n```";
    let llm = Arc::new(
        ScriptedTransport::new([
            Ok(mock_critique(BAR_CHART_SCRIPT)),
            Ok(broken.to_string()),
            Ok(broken.to_string()),
            Ok(broken.to_string()),
        ])
        .then(MockLlm::default()),
    );
    let p = scripted_pipeline(dir.path(), Arc::new(MockDerenderer::default()), llm.clone());
    let s = p.create_session(BAR_CHART_PNG.to_vec(), None).unwrap();
    let analyzed = p.analyze(&s.id).unwrap().session;
    let chosen: Vec<String> = analyzed.round(0).take(2).map(|r| r.id.clone()).collect();

    let err = p.apply(&s.id, &chosen).unwrap_err();
    let PipelineError::RenderValidationFailed(outcome) = &err else { panic!("{err:?}") };
    assert_eq!(outcome.attempts, 3);
    assert!(outcome.failure_reason.as_deref().unwrap().contains("RuntimeError"));
    assert_eq!(err.class(), ErrorClass::Backend);

    let after = p.load(&s.id).unwrap();
    assert_eq!(after.revisions.len(), 1);
    assert_eq!(after.state, SessionState::Analyzed);
    assert_eq!(after.recommendations, analyzed.recommendations);
    assert_eq!(after.audit_log.iter().filter(|a| a.event == "edit_attempt_failed").count(), 3);
    after.check_invariants().unwrap();
    // Repair prompts carry the interpreter's error back to the model.
    assert!(llm.requests()[2].prompt.contains("broken edit"));

    // The same selection succeeds once the model behaves.
    let ok = p.apply(&s.id, &chosen).unwrap();
    assert_eq!(ok.revision_index, 1);
    ok.session.check_invariants().unwrap();
}

#[test]
fn prose_only_derender_marks_session_failed_and_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let derender = Arc::new(
        ScriptedTransport::new([Ok("I am unable to reproduce this chart.".to_string())]).then(MockDerenderer::default()),
    );
    let p = scripted_pipeline(dir.path(), derender, Arc::new(MockLlm::default()));
    let s = p.create_session(BAR_CHART_PNG.to_vec(), None).unwrap();
    assert!(matches!(p.analyze(&s.id), Err(PipelineError::EmptyCompletion)));
    let failed = p.load(&s.id).unwrap();
    assert_eq!(failed.state, SessionState::Failed);
    assert!(failed.revisions.is_empty());
    assert!(failed.audit_log.iter().any(|a| a.event == "derender_failed"));

    let retried = p.analyze(&s.id).unwrap();
    assert_eq!(retried.session.state, SessionState::Analyzed);
    retried.session.check_invariants().unwrap();
}

#[test]
fn apply_rejects_bad_selections_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let p = mock_pipeline(dir.path());
    let s = p.create_session(BAR_CHART_PNG.to_vec(), None).unwrap();
    assert!(matches!(p.apply(&s.id, &["x".into()]), Err(PipelineError::Conflict(_))));
    let analyzed = p.analyze(&s.id).unwrap().session;
    let ids: Vec<String> = analyzed.round(0).map(|r| r.id.clone()).collect();

    assert_eq!(p.apply(&s.id, &[]).unwrap_err().class(), ErrorClass::InvalidInput);
    assert_eq!(p.apply(&s.id, &[ids[0].clone(), ids[0].clone()]).unwrap_err().class(), ErrorClass::InvalidInput);
    assert_eq!(p.apply(&s.id, &["ffff".into()]).unwrap_err().class(), ErrorClass::NotFound);
    assert_eq!(p.apply("0000", &[ids[0].clone()]).unwrap_err().class(), ErrorClass::NotFound);

    p.dismiss(&s.id, &[ids[0].clone()]).unwrap();
    assert_eq!(p.apply(&s.id, &[ids[0].clone()]).unwrap_err().class(), ErrorClass::Conflict);
    assert_eq!(p.analyze(&s.id).unwrap_err().class(), ErrorClass::Conflict);

    let after = p.load(&s.id).unwrap();
    assert_eq!(after.revisions.len(), 1);
    assert!(after.round(0).skip(1).all(|r| r.status == RecommendationStatus::Proposed));
}

#[test]
fn sessions_are_byte_identical_across_runs() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let p = mock_pipeline(dir.path());
        let s = p.create_session(BAR_CHART_PNG.to_vec(), None).unwrap();
        let a = p.analyze(&s.id).unwrap().session;
        let first = a.round(0).next().unwrap().id.clone();
        p.apply(&s.id, &[first]).unwrap();
        std::fs::read(p.store().document_path(&s.id)).unwrap()
    };
    assert_eq!(run(), run());
}

#[derive(Debug, Clone, Copy)]
enum Fault {
    BrokenScript,
    ProseOnly,
    Unreachable,
}

fn fault_reply(f: Fault) -> Result<String, chart_refinery::backend::TransportError> {
    match f {
        Fault::BrokenScript => Ok("```python\nraise RuntimeError('fault')\n```".into()),
        Fault::ProseOnly => Ok("I would rather not change anything.".into()),
        Fault::Unreachable => Err(chart_refinery::backend::TransportError::Unreachable("injected".into())),
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig { cases: 8, ..Default::default() })]

    /// Whatever the edit backend does, apply either appends exactly one
    /// revision or leaves everything except the audit log as it was.
    #[test]
    fn apply_is_atomic_under_injected_faults(
        faults in proptest::collection::vec(
            proptest::prop_oneof![
                proptest::strategy::Just(Fault::BrokenScript),
                proptest::strategy::Just(Fault::ProseOnly),
                proptest::strategy::Just(Fault::Unreachable),
            ],
            0..4,
        )
    ) {
        let dir = tempfile::tempdir().unwrap();
        let replies = std::iter::once(Ok(mock_critique(BAR_CHART_SCRIPT))).chain(faults.iter().map(|&f| fault_reply(f)));
        let llm = Arc::new(ScriptedTransport::new(replies).then(MockLlm::default()));
        let p = scripted_pipeline(dir.path(), Arc::new(MockDerenderer::default()), llm);
        let s = p.create_session(BAR_CHART_PNG.to_vec(), None).unwrap();
        let before = p.analyze(&s.id).unwrap().session;
        let chosen: Vec<String> = before.round(0).take(2).map(|r| r.id.clone()).collect();

        let result = p.apply(&s.id, &chosen);
        let after = p.load(&s.id).unwrap();
        after.check_invariants().unwrap();
        let hits_unreachable = faults.iter().take(3).any(|f| matches!(f, Fault::Unreachable));
        let exhausted = faults.len() >= 3;
        match result {
            Ok(out) => {
                proptest::prop_assert!(!hits_unreachable && !exhausted, "{faults:?} should have failed");
                proptest::prop_assert_eq!(after.revisions.len(), before.revisions.len() + 1);
                proptest::prop_assert_eq!(out.edit.attempts as usize, faults.len() + 1);
                for id in &chosen {
                    proptest::prop_assert_eq!(after.recommendation(id).unwrap().status, RecommendationStatus::Applied);
                }
            }
            Err(e) => {
                proptest::prop_assert!(hits_unreachable || exhausted, "{faults:?}: {e}");
                proptest::prop_assert_eq!(&after.revisions, &before.revisions);
                proptest::prop_assert_eq!(&after.recommendations, &before.recommendations);
                proptest::prop_assert_eq!(after.state, before.state);
            }
        }
    }
}
