use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chart_refinery::analytics::synthetic::themed_recommendations;
use chart_refinery::backend::mock::BAR_CHART_PNG;
use serde_json::Value;

fn refine(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refine"))
        .arg("--mock-backends")
        .arg("--session-dir")
        .arg(store)
        .args(args)
        .env_remove("CHART_REFINERY_CONFIG")
        .env_remove("CHART_REFINERY_DETERMINISTIC")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn chart(dir: &Path) -> PathBuf {
    let p = dir.join("chart.png");
    std::fs::write(&p, BAR_CHART_PNG).unwrap();
    p
}

fn numbered_lines(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .filter_map(|l| {
            let rest = l.strip_prefix('[')?;
            let (n, t) = rest.split_once("] ")?;
            Some((n.parse().ok()?, t.to_string()))
        })
        .collect()
}

fn only_session(store: &Path) -> String {
    let ids: Vec<_> = std::fs::read_dir(store.join("sessions"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(ids.len(), 1);
    ids[0].clone()
}

#[test]
fn analyze_prints_spec_path_and_numbered_recommendations() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let out = ok(refine(&store, &["analyze", chart(dir.path()).to_str().unwrap()]));
    let spec_line = out.lines().find_map(|l| l.strip_prefix("spec ")).expect("spec line");
    assert!(Path::new(spec_line).is_file());
    let recs = numbered_lines(&out);
    assert!(!recs.is_empty());
    assert_eq!(recs.iter().map(|(n, _)| *n).collect::<Vec<_>>(), (1..=recs.len()).collect::<Vec<_>>());
}

#[test]
fn apply_then_reanalyze() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let first = ok(refine(&store, &["analyze", chart(dir.path()).to_str().unwrap()]));
    let round0 = numbered_lines(&first);
    let id = only_session(&store);

    let out = ok(refine(&store, &["apply", "--session", &id, "--recs", "1,3"]));
    assert!(out.lines().any(|l| l == "revision 1"), "{out}");
    let png = out.lines().find_map(|l| l.strip_prefix("image ")).unwrap();
    assert!(std::fs::read(png).unwrap().starts_with(b"\x89PNG"));

    let again = ok(refine(&store, &["reanalyze", "--session", &id]));
    let round1 = numbered_lines(&again);
    assert!(!round1.is_empty());
    for applied in [&round0[0].1, &round0[2].1] {
        assert!(round1.iter().all(|(_, t)| t != applied), "{applied} was proposed again");
    }

    let doc: Value = serde_json::from_str(&std::fs::read_to_string(store.join("sessions").join(&id).join("session.json")).unwrap()).unwrap();
    assert_eq!(doc["revisions"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let missing = refine(&store, &["analyze", "/definitely/not/here.png"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    let text = dir.path().join("notes.png");
    std::fs::write(&text, b"not an image").unwrap();
    assert_eq!(refine(&store, &["analyze", text.to_str().unwrap()]).status.code(), Some(2));

    ok(refine(&store, &["analyze", chart(dir.path()).to_str().unwrap()]));
    let id = only_session(&store);
    let before = std::fs::read(store.join("sessions").join(&id).join("session.json")).unwrap();
    let bad = refine(&store, &["apply", "--session", &id, "--recs", "99"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("99"));
    assert_eq!(std::fs::read(store.join("sessions").join(&id).join("session.json")).unwrap(), before);

    assert_eq!(refine(&store, &["apply", "--session", &"0".repeat(32), "--recs", "1"]).status.code(), Some(2));
    assert_eq!(refine(&store, &["reanalyze", "--session", "nope"]).status.code(), Some(2));
    assert_eq!(refine(&store, &["bogus-subcommand"]).status.code(), Some(2));
}

#[test]
fn unreachable_backend_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_refine"))
        .args(["--session-dir", dir.path().join("store").to_str().unwrap(), "analyze"])
        .arg(chart(dir.path()))
        .env_remove("CHART_REFINERY_CONFIG")
        .env("CHART_REFINERY_DERENDER_URL", "http://127.0.0.1:9/v1/chat/completions")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unreachable"));
}

#[test]
fn json_flag_prints_one_document() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let a: Value = serde_json::from_str(&ok(refine(&store, &["--json", "analyze", chart(dir.path()).to_str().unwrap()]))).unwrap();
    let id = a["session_id"].as_str().unwrap().to_string();
    assert!(a["recommendations"].as_array().unwrap().len() >= 2);

    let b: Value = serde_json::from_str(&ok(refine(&store, &["--json", "apply", "--session", &id, "--recs", "2"]))).unwrap();
    assert_eq!(b["revision_index"], 1);
    let r: Value = serde_json::from_str(&ok(refine(&store, &["--json", "reanalyze", "--session", &id]))).unwrap();
    assert_eq!(r["round"], 1);
    let s: Value = serde_json::from_str(&ok(refine(&store, &["--json", "show", "--session", &id]))).unwrap();
    assert_eq!(s["id"], id.as_str());

    let err = refine(&store, &["--json", "apply", "--session", &id, "--recs", "99"]);
    assert_eq!(err.status.code(), Some(2));
    let e: Value = serde_json::from_str(&stdout(&err)).unwrap();
    assert_eq!(e["error"]["exit_code"], 2);
}

#[test]
fn eval_over_recommendation_file_recovers_ten_themes() {
    let dir = tempfile::tempdir().unwrap();
    let recs = dir.path().join("recs.txt");
    let lines: Vec<String> = themed_recommendations(100, 3).into_iter().map(|(text, _)| format!("# {text}")).collect();
    std::fs::write(&recs, lines.join("\n")).unwrap();
    let out = dir.path().join("out");
    let o = ok(refine(
        &dir.path().join("store"),
        &["--json", "eval", "--recs-file", recs.to_str().unwrap(), "--k-range", "2:20", "--seeds", "5", "--out", out.to_str().unwrap()],
    ));
    let v: Value = serde_json::from_str(&o).unwrap();
    assert_eq!(v["selected_k"], 10, "{v}");
    assert!(v["db_score"].as_f64().unwrap() > 0.0);
    for f in ["embeddings.bin", "clusters.json", "projection.csv", "report.md"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn eval_over_image_corpus_and_text_files() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    chart(&corpus);
    let extra: Vec<String> = themed_recommendations(5, 1).into_iter().map(|(t, _)| format!("# {t}")).collect();
    std::fs::write(corpus.join("more.txt"), extra.join("\n")).unwrap();
    let out = dir.path().join("out");
    let text = ok(refine(
        &dir.path().join("store"),
        &["eval", "--corpus", corpus.to_str().unwrap(), "--k-range", "2:4", "--seeds", "2", "--out", out.to_str().unwrap()],
    ));
    assert!(text.contains("selected k "), "{text}");
    assert!(text.contains("davies-bouldin "), "{text}");
    let n: usize = text.lines().find_map(|l| l.strip_prefix("recommendations ")).unwrap().parse().unwrap();
    assert!(n > extra.len());
    assert!(out.join("report.md").is_file());
}

#[test]
fn eval_input_and_backend_failures() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = dir.path().join("out");
    let store = dir.path().join("store");
    let args = |c: &Path| {
        vec!["eval".to_string(), "--corpus".into(), c.display().to_string(), "--out".into(), out.display().to_string()]
    };
    let o = refine(&store, &args(&empty).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(refine(&store, &["eval", "--corpus", "/no/such/dir", "--out", "x"]).status.code(), Some(2));

    let corpus = dir.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    std::fs::write(corpus.join("r.txt"), (0..40).map(|i| format!("# Fix axis {i}")).collect::<Vec<_>>().join("\n")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_refine"))
        .args(args(&corpus))
        .args(["--k-range", "2:4"])
        .env_remove("CHART_REFINERY_CONFIG")
        .env("CHART_REFINERY_EMBED_URL", "http://127.0.0.1:9/api/embed")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
