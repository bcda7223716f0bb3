//! End-to-end runner, benchmark harness and trace inspection.

mod bench;
mod config;
mod inspect;
mod run;

pub use bench::{bench, BenchCase, BenchManifest, BenchRow, BenchSummary};
pub use config::{BackendSpec, RunConfig, ToolEndpoints, DEFAULT_PARALLEL, DEFAULT_TARGET_RATE};
pub use inspect::{inspect_tree, load_trace, parse_trace, render_dot, render_text};
pub use run::{CallCounts, EventReport, Pipeline, RunReport, RunSummary};

use crate::experts::Stage2Error;
use crate::mixer::MixError;
use crate::plan::InputError;
use crate::stage1::Stage1Error;
use crate::tot::TotError;

/// Process exit codes, one per failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const INPUT: i32 = 3;
    pub const STAGE1: i32 = 10;
    pub const STAGE2: i32 = 11;
    pub const STAGE3: i32 = 12;
    pub const MIX: i32 = 13;
    pub const IO: i32 = 14;
    pub const TRACE_PARSE: i32 = 15;
    pub const MANIFEST: i32 = 16;
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(#[from] InputError),
    #[error("stage 1: {0}")]
    Stage1(#[from] Stage1Error),
    #[error("stage 2: {0}")]
    Stage2(#[from] Stage2Error),
    #[error("stage 3 (event {event_index}): {source}")]
    Stage3 {
        event_index: usize,
        #[source]
        source: TotError,
    },
    #[error("mix: {0}")]
    Mix(#[from] MixError),
    #[error("io: {0}")]
    Io(String),
    #[error("trace parse: {0}")]
    TraceParse(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => exit::CONFIG,
            PipelineError::Input(_) | PipelineError::Stage1(Stage1Error::Input(_)) => exit::INPUT,
            PipelineError::Stage1(_) => exit::STAGE1,
            PipelineError::Stage2(_) => exit::STAGE2,
            PipelineError::Stage3 { .. } => exit::STAGE3,
            PipelineError::Mix(_) => exit::MIX,
            PipelineError::Io(_) => exit::IO,
            PipelineError::TraceParse(_) => exit::TRACE_PARSE,
            PipelineError::Manifest(_) => exit::MANIFEST,
        }
    }

    /// Short stage tag used in reports.
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Input(_) | PipelineError::Stage1(Stage1Error::Input(_)) => "input",
            PipelineError::Stage1(_) => "stage1",
            PipelineError::Stage2(_) => "stage2",
            PipelineError::Stage3 { .. } => "stage3",
            PipelineError::Mix(_) => "mix",
            PipelineError::Io(_) => "io",
            PipelineError::TraceParse(_) => "trace",
            PipelineError::Manifest(_) => "manifest",
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}
