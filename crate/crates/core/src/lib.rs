//! Chart refinement pipeline.
//!
//! A raster chart is turned back into a plotting script by a chart-to-code
//! model, the script is re-rendered in a sandboxed interpreter, and a chat
//! model lists design issues as `#`-prefixed lines. Users pick issues to
//! fix, an edit prompt produces a new script, and the loop repeats. The
//! [`analytics`] module clusters large collections of those issues.

pub mod analytics;
pub mod backend;
pub mod clock;
pub mod config;
pub mod critique;
pub mod derender;
pub mod pipeline;
pub mod refine;
pub mod sandbox;
pub mod session;

pub use clock::{Clock, FixedClock, IdSource, RandomIds, SequentialIds, SystemClock};
pub use config::Config;
pub use pipeline::{AnalyzeOutcome, ApplyOutcome, ErrorClass, Pipeline, PipelineError, PipelineParts};
pub use session::{
    ChartImage, ChartSpec, ImageFormat, Recommendation, RecommendationStatus, Revision, Session, SessionState,
    SessionStore,
};
