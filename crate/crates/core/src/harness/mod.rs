//! Experiment harness: prompt generation, sharded runs, traces and summaries.

pub mod config;
pub mod prompts;
pub mod runner;
pub mod stats;
pub mod sweep;
pub mod trace;

use thiserror::Error;

use crate::drafter::DraftError;
use crate::engine::EngineError;
use crate::toy_model::ModelError;

pub use config::{RunConfig, RunManifest, SubsetSpec};
pub use prompts::{gen_prompts, shard, Prompt};
pub use runner::{execute, merge_traces, read_traces, run, FailureDump, RunOutput};
pub use stats::{
    accept_pos, nearest_rank, stage_breakdown, summarize, write_stage_breakdown, write_summary, StageRow,
    SummaryReport, SummaryStats,
};
pub use sweep::{sweep, write_sweep_csv, SweepGrid, SweepPoint, SweepRow};
pub use trace::{DecoderKind, IterationRecord, StageTimings, TurnTrace};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("traces carry no stage timings; rerun with profiling enabled")]
    NoTimings,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Draft(#[from] DraftError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}
