//! `refine`: headless driver for the chart refinement loop and for corpus
//! clustering runs.
//!
//! Exit codes: 0 success, 2 bad input or usage, 3 backend or render
//! failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use chart_refinery::analytics::{load_corpus, run_eval, AnalyticsError, CorpusEntry, EvalParams, KRange};
use chart_refinery::{
    Clock, Config, ErrorClass, FixedClock, IdSource, Pipeline, PipelineError, RandomIds, Recommendation,
    RecommendationStatus, SequentialIds, Session, SystemClock,
};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

pub const ENV_DETERMINISTIC: &str = "CHART_REFINERY_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(name = "refine", version, about = "Chart de-rendering, critique and refinement")]
pub struct Cli {
    /// TOML or JSON configuration file.
    #[arg(long, global = true, env = "CHART_REFINERY_CONFIG")]
    pub config: Option<PathBuf>,
    /// Session store directory (overrides the configured one).
    #[arg(long, global = true)]
    pub session_dir: Option<PathBuf>,
    /// Use the built-in offline backends instead of model servers.
    #[arg(long, global = true)]
    pub mock_backends: bool,
    /// Print exactly one JSON document on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Fixed timestamps and sequential ids, for reproducible stores.
    #[arg(long, global = true, hide = true, env = ENV_DETERMINISTIC)]
    pub deterministic: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Upload a chart image, recover its script and list recommendations.
    Analyze {
        image: PathBuf,
    },
    /// Apply recommendations by their printed numbers and render the result.
    Apply {
        #[arg(long)]
        session: String,
        /// Comma-separated numbers from the latest round, e.g. `1,3`.
        #[arg(long, value_delimiter = ',', required = true)]
        recs: Vec<usize>,
    },
    /// Critique the latest revision again.
    Reanalyze {
        #[arg(long)]
        session: String,
    },
    /// Print a stored session.
    Show {
        #[arg(long)]
        session: String,
    },
    /// Embed, cluster and report a corpus of recommendations.
    Eval(EvalArgs),
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of chart images and/or recommendation files.
    #[arg(long, required_unless_present = "recs_file")]
    pub corpus: Option<PathBuf>,
    /// A `.jsonl`, `.txt` or `session.json` recommendations file.
    #[arg(long)]
    pub recs_file: Option<PathBuf>,
    /// Inclusive `min:max` (default: config, normally `2:20`).
    #[arg(long)]
    pub k_range: Option<KRange>,
    /// Seeds per k (default: config, normally 5).
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// `cosine` L2-normalizes embeddings before clustering (default: config).
    #[arg(long, value_parser = ["none", "cosine"])]
    pub normalize: Option<String>,
    /// `id,x,y` CSV to use instead of the PCA projection.
    #[arg(long)]
    pub projection: Option<PathBuf>,
    /// Embedding cache directory (default: `<out>/cache`).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

/// Successful command output in both renderings.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub text: String,
    pub json: Value,
}

#[derive(Debug)]
pub struct Failure {
    pub exit_code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            exit_code: EXIT_INPUT,
            error: error.into(),
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "error": { "exit_code": self.exit_code, "message": format!("{:#}", self.error) } })
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let exit_code = match e.class() {
            ErrorClass::InvalidInput | ErrorClass::NotFound | ErrorClass::Conflict => EXIT_INPUT,
            ErrorClass::Backend => EXIT_BACKEND,
            ErrorClass::Internal => EXIT_INTERNAL,
        };
        let error = match &e {
            PipelineError::RenderValidationFailed(o) => {
                anyhow!("{e}: {}", o.failure_reason.as_deref().unwrap_or("no detail"))
            }
            _ => anyhow!(e),
        };
        Failure { exit_code, error }
    }
}

impl From<AnalyticsError> for Failure {
    fn from(e: AnalyticsError) -> Self {
        let exit_code = match &e {
            AnalyticsError::Backend(_) | AnalyticsError::DimensionMismatch { .. } | AnalyticsError::NonFinite { .. } => {
                EXIT_BACKEND
            }
            AnalyticsError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_INPUT,
            AnalyticsError::Io(_) => EXIT_INTERNAL,
            _ => EXIT_INPUT,
        };
        Failure {
            exit_code,
            error: e.into(),
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut cfg = Config::load(cli.config.as_deref()).map_err(Failure::input)?;
    if let Some(dir) = &cli.session_dir {
        cfg.store.root = dir.clone();
    }
    if cli.mock_backends {
        cfg.use_mock_backends();
    }
    Ok(cfg)
}

/// Highest sequential id already present in the store, so deterministic
/// runs across invocations never reissue an id.
fn last_sequential_id(pipeline: &Pipeline) -> u64 {
    let parse = |id: &str| u128::from_str_radix(id, 16).ok().and_then(|v| u64::try_from(v).ok()).unwrap_or(0);
    let ids = pipeline.store().list().unwrap_or_default();
    ids.iter()
        .filter_map(|id| pipeline.load(id).ok())
        .flat_map(|s| {
            let recs: Vec<u64> = s.recommendations.iter().map(|r| parse(&r.id)).collect();
            recs.into_iter().chain([parse(&s.id)])
        })
        .max()
        .unwrap_or(0)
}

fn build_pipeline(cfg: &Config, deterministic: bool) -> Result<Pipeline, Failure> {
    if !deterministic {
        return Ok(Pipeline::from_config_with(cfg, Arc::new(SystemClock), Arc::new(RandomIds))?);
    }
    let clock: Arc<dyn Clock> = Arc::new(FixedClock::epoch());
    let probe = Pipeline::from_config_with(cfg, clock.clone(), Arc::new(SequentialIds::new()))?;
    let ids: Arc<dyn IdSource> = Arc::new(SequentialIds::starting_after(last_sequential_id(&probe)));
    Ok(Pipeline::from_config_with(cfg, clock, ids)?)
}

fn latest_round(session: &Session) -> Vec<&Recommendation> {
    match session.max_round() {
        Some(r) => session.round(r).collect(),
        None => Vec::new(),
    }
}

/// Writes `revision-<n>.py` (and `.png` when rendered) next to the session
/// document and returns their paths.
fn export_revision(pipeline: &Pipeline, session: &Session, n: usize) -> anyhow::Result<(PathBuf, Option<PathBuf>)> {
    let dir = pipeline.store().session_dir(&session.id);
    let rev = &session.revisions[n];
    let spec_path = dir.join(format!("revision-{n}.py"));
    fs::write(&spec_path, &rev.spec.source).with_context(|| format!("writing {}", spec_path.display()))?;
    let png = match rev.render.as_ref().and_then(|r| r.image.as_ref()) {
        Some(img) => {
            let p = dir.join(format!("revision-{n}.{}", if img.format.mime() == "image/png" { "png" } else { "jpg" }));
            fs::write(&p, &img.bytes).with_context(|| format!("writing {}", p.display()))?;
            Some(p)
        }
        None => None,
    };
    Ok((spec_path, png))
}

fn round_listing(session: &Session) -> (String, Value) {
    let recs = latest_round(session);
    let mut text = String::new();
    let mut items = Vec::new();
    for (i, r) in recs.iter().enumerate() {
        text.push_str(&format!("[{}] {}{}\n", i + 1, r.text, status_suffix(r.status)));
        items.push(json!({ "n": i + 1, "id": r.id, "text": r.text, "status": r.status, "round": r.round }));
    }
    (text, Value::Array(items))
}

fn status_suffix(s: RecommendationStatus) -> &'static str {
    match s {
        RecommendationStatus::Proposed => "",
        RecommendationStatus::Selected => " (selected)",
        RecommendationStatus::Applied => " (applied)",
        RecommendationStatus::Dismissed => " (dismissed)",
    }
}

fn failure_internal(e: anyhow::Error) -> Failure {
    Failure {
        exit_code: EXIT_INTERNAL,
        error: e,
    }
}

fn cmd_analyze(pipeline: &Pipeline, image: &Path) -> Result<Output, Failure> {
    let bytes = fs::read(image)
        .with_context(|| format!("reading {}", image.display()))
        .map_err(Failure::input)?;
    let session = pipeline.create_session(bytes, None)?;
    let outcome = pipeline.analyze(&session.id)?;
    let s = &outcome.session;
    let (spec_path, png) = export_revision(pipeline, s, 0).map_err(failure_internal)?;
    let (listing, items) = round_listing(s);
    let render_status = outcome.render.as_ref().map(|r| r.status);
    let mut text = format!("session {}\nspec {}\n", s.id, spec_path.display());
    if let Some(p) = &png {
        text.push_str(&format!("render {}\n", p.display()));
    } else if let Some(r) = &outcome.render {
        text.push_str(&format!("render failed ({:?}): {}\n", r.status, r.stderr_excerpt));
    }
    if let Some(w) = &outcome.round.warning {
        text.push_str(&format!("warning: {w}\n"));
    }
    text.push_str(&listing);
    Ok(Output {
        text,
        json: json!({
            "session_id": s.id,
            "state": s.state,
            "round": outcome.round.round,
            "spec_path": spec_path,
            "render_status": render_status,
            "image_path": png,
            "recommendations": items,
            "warning": outcome.round.warning,
        }),
    })
}

fn cmd_apply(pipeline: &Pipeline, id: &str, numbers: &[usize]) -> Result<Output, Failure> {
    let session = pipeline.load(id)?;
    let recs = latest_round(&session);
    let mut ids = Vec::with_capacity(numbers.len());
    for &n in numbers {
        let rec = n
            .checked_sub(1)
            .and_then(|i| recs.get(i))
            .ok_or_else(|| Failure::input(anyhow!("recommendation number {n} is out of range 1..={}", recs.len())))?;
        ids.push(rec.id.clone());
    }
    let outcome = pipeline.apply(id, &ids)?;
    let n = outcome.revision_index;
    let (spec_path, png) = export_revision(pipeline, &outcome.session, n).map_err(failure_internal)?;
    let png = png.ok_or_else(|| failure_internal(anyhow!("revision {n} has no rendered image")))?;
    Ok(Output {
        text: format!("revision {n}\nspec {}\nimage {}\n", spec_path.display(), png.display()),
        json: json!({
            "session_id": id,
            "revision_index": n,
            "attempts": outcome.edit.attempts,
            "applied_ids": ids,
            "spec_path": spec_path,
            "image_path": png,
        }),
    })
}

fn cmd_reanalyze(pipeline: &Pipeline, id: &str) -> Result<Output, Failure> {
    let outcome = pipeline.reanalyze(id)?;
    let (listing, items) = round_listing(&outcome.session);
    let mut text = format!("session {id} round {}\n", outcome.round.round);
    if let Some(w) = &outcome.round.warning {
        text.push_str(&format!("warning: {w}\n"));
    }
    text.push_str(&listing);
    Ok(Output {
        text,
        json: json!({
            "session_id": id,
            "round": outcome.round.round,
            "recommendations": items,
            "dropped_duplicates": outcome.round.dropped_duplicates,
            "warning": outcome.round.warning,
        }),
    })
}

fn cmd_show(pipeline: &Pipeline, id: &str) -> Result<Output, Failure> {
    let s = pipeline.load(id)?;
    let mut text = format!("session {} {:?}\n", s.id, s.state);
    for r in &s.revisions {
        let status = r.render.as_ref().map(|x| format!("{:?}", x.status)).unwrap_or_else(|| "unrendered".into());
        text.push_str(&format!("revision {} {status} applied {}\n", r.index, r.applied_recommendation_ids.len()));
    }
    text.push_str(&round_listing(&s).0);
    let json = serde_json::to_value(&s).map_err(|e| failure_internal(e.into()))?;
    Ok(Output { text, json })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn image_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if is_image(&p) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn gather_corpus(cfg: &Config, args: &EvalArgs, deterministic: bool) -> Result<Vec<CorpusEntry>, Failure> {
    let mut entries = Vec::new();
    if let Some(f) = &args.recs_file {
        entries.extend(load_corpus(f)?);
    }
    if let Some(dir) = &args.corpus {
        if !dir.is_dir() {
            return Err(Failure::input(anyhow!("corpus {} is not a directory", dir.display())));
        }
        let images = image_files(dir).map_err(|e| Failure::input(anyhow!(e)))?;
        if !images.is_empty() {
            let pipeline = build_pipeline(cfg, deterministic)?;
            for path in &images {
                let name = path.strip_prefix(dir).unwrap_or(path).display().to_string();
                let bytes = fs::read(path).map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))?;
                tracing::info!(image = %name, "derendering and critiquing");
                entries.extend(pipeline.recommendations_for_image(&name, bytes)?);
            }
        }
        match load_corpus(dir) {
            Ok(texts) => entries.extend(texts),
            Err(AnalyticsError::EmptyCorpus) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if entries.is_empty() {
        return Err(AnalyticsError::EmptyCorpus.into());
    }
    Ok(entries)
}

fn cmd_eval(cfg: &Config, args: &EvalArgs, deterministic: bool) -> Result<Output, Failure> {
    let entries = gather_corpus(cfg, args, deterministic)?;
    let seeds = args.seeds.unwrap_or(cfg.analytics.seeds as u64);
    if seeds == 0 {
        return Err(Failure::input(anyhow!("--seeds must be positive")));
    }
    let k_range = match args.k_range {
        Some(r) => r,
        None => KRange::new(cfg.analytics.k_min, cfg.analytics.k_max).map_err(Failure::from)?,
    };
    let embedder = chart_refinery::pipeline::embedder(cfg)?;
    let params = EvalParams {
        k_range,
        seeds: (0..seeds).collect(),
        normalize: args.normalize.as_deref().unwrap_or(&cfg.analytics.normalize) == "cosine",
        external_projection: args.projection.clone(),
        cache_dir: Some(
            args.cache_dir
                .clone()
                .or_else(|| cfg.analytics.cache_dir.clone())
                .unwrap_or_else(|| args.out.join("cache")),
        ),
    };
    let progress = |p: f64, stage: &str| tracing::info!(progress = p, stage, "eval");
    let art = run_eval(&entries, &embedder, &params, &args.out, Some(&progress))?;
    let best = &art.selection.best;
    let db = best.db_score.map_or("n/a".to_string(), |d| format!("{d:.6}"));
    let sizes: Vec<usize> = art.report.clusters.iter().map(|c| c.size).collect();
    Ok(Output {
        text: format!(
            "recommendations {}\nselected k {}\ndavies-bouldin {db}\ncluster sizes {sizes:?}\nwrote {}\n",
            entries.len(),
            best.k,
            args.out.display()
        ),
        json: json!({
            "n_recommendations": entries.len(),
            "selected_k": best.k,
            "db_score": best.db_score,
            "seed": best.seed,
            "db_curve": art.selection.curve,
            "cluster_sizes": sizes,
            "artifacts": {
                "embeddings": art.embeddings_path,
                "clusters": art.clusters_path,
                "projection": art.projection_path,
                "report": art.report_path,
            },
        }),
    })
}

fn cmd_serve(mut cfg: Config, bind: Option<String>, deterministic: bool) -> Result<Output, Failure> {
    if let Some(b) = bind {
        cfg.server.bind = b;
    }
    let pipeline = build_pipeline(&cfg, deterministic)?;
    let state = chart_refinery_server::AppState::new(pipeline, cfg);
    let rt = tokio::runtime::Runtime::new().map_err(|e| failure_internal(e.into()))?;
    rt.block_on(chart_refinery_server::serve(state))
        .context("serving HTTP")
        .map_err(Failure::input)?;
    Ok(Output {
        text: String::new(),
        json: Value::Null,
    })
}

pub fn run(cli: Cli) -> Result<Output, Failure> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Analyze { image } => cmd_analyze(&build_pipeline(&cfg, cli.deterministic)?, image),
        Command::Apply { session, recs } => cmd_apply(&build_pipeline(&cfg, cli.deterministic)?, session, recs),
        Command::Reanalyze { session } => cmd_reanalyze(&build_pipeline(&cfg, cli.deterministic)?, session),
        Command::Show { session } => cmd_show(&build_pipeline(&cfg, cli.deterministic)?, session),
        Command::Eval(args) => cmd_eval(&cfg, args, cli.deterministic),
        Command::Serve { bind } => cmd_serve(cfg.clone(), bind.clone(), cli.deterministic),
    }
}
