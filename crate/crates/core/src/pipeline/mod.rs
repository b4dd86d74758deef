//! Dataset-level runs: configuration, orchestration, persistence and
//! reporting.
//!
//! A run walks every (model, image, instruction) work item, persists one
//! [`CaptionRecord`](crate::engine::CaptionRecord) per caption in an
//! append-only file, and aggregates the records into a [`RunReport`].
//! Rerunning with the same output directory skips items already recorded.

use std::path::PathBuf;

use thiserror::Error;

mod config;
mod dataset;
mod report;
mod run;

pub use config::{PopeSection, Resources, RetryConfig, RunConfig, StoreConfig};
pub use dataset::{
    convert_coco, load_dataset, load_ingested, CocoConversion, CocoOptions, DatasetInstance, IngestedCaption,
    Instruction, InstructionSet,
};
pub use report::{
    build_report, render_table, write_table, FailureRecord, GroupReport, ReportFormat, RunManifest, RunReport, RunStatus, StoreInfo,
};
pub use run::{RunOutcome, Session, WorkKey};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}:{line}: {reason}")]
    Data { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no caption records found in {0}")]
    NoRecords(PathBuf),
    #[error("{0}")]
    Stage(String),
}

impl PipelineError {
    /// Process exit code: 2 for configuration and input errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Data { .. } => 2,
            _ => 1,
        }
    }
}
