//! Experiment driver: configuration, data loading, baselines, the
//! ranking-vs-selection experiment, and report output.

pub mod artifacts;
pub mod baselines;
pub mod config;
pub mod data;
pub mod gap;
pub mod pipeline;
pub mod report;

pub use baselines::{psr_rank, run_baseline, System, SystemInputs, SystemRun};
pub use config::ExperimentConfig;
pub use data::{ingest_dataset, Dataset};
pub use gap::{run_gap_experiment, GapReport};
pub use artifacts::{RunDir, Runner};
pub use pipeline::{reproduction_rate, Backend, Experiment};
pub use report::{emit_report, ReportFormat, ResultRow, ResultTable};

use std::path::PathBuf;

use crate::evaluator::oracle::OracleError;
use crate::evaluator::EvalError;
use crate::jsonl::JsonlError;
use crate::policy::{CheckpointError, PolicyError, TrainError};
use crate::retrieval::RetrievalError;
use crate::rl::RlError;
use crate::sps::SpsError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{}: no examples", .0.display())]
    NoExamples(PathBuf),
    #[error("{}:{line}: unknown passage id `{passage_id}`", path.display())]
    DanglingPassage {
        path: PathBuf,
        line: usize,
        passage_id: String,
    },
    #[error("{}:{line}: duplicate example id `{example_id}`", path.display())]
    DuplicateExample {
        path: PathBuf,
        line: usize,
        example_id: String,
    },
    #[error("unknown system `{0}` (expected naive, random, gtr, psr, psr_top<k>, bgm)")]
    UnknownSystem(String),
    #[error("bgm needs a trained bridge checkpoint")]
    MissingCheckpoint,
    #[error("gap experiment is defined for top-5 lists; example {example_id} has {k} candidates")]
    GapK { example_id: String, k: usize },
    #[error("unpermuted top-5 mean reward is zero; spreads are undefined")]
    ZeroBaseline,
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Missing(String),
    #[error("example {example_id}: {source}")]
    Evaluator {
        example_id: String,
        #[source]
        source: EvalError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Sps(#[from] SpsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
