//! Command layer behind the `otp` binary: property verification, training
//! runs, perturbation sweeps and summary reports. Every command writes a
//! `manifest.json` into its output directory and stamps the manifest hash
//! into each file it emits.

mod eval;
mod manifest;
mod report;
pub mod stats;
pub mod svg;
mod train;
mod verify;

pub use eval::{
    aggregate, cmd_eval, method_label, pick_baseline, resolve_checkpoint, EvalCell, EvalOptions, EvalReport, EvalRow,
    MethodAggregate, EVAL_COLUMNS,
};
pub use manifest::{code_hash, sha256_hex, RunManifest};
pub use report::{cmd_report, read_eval_csv, render_markdown, summarize, PairComparison, ReportInput, Summary};
pub use train::{cmd_train, resolve_train_config, TrainOverrides, TrainRun};
pub use verify::{cmd_verify, CheckRow, Suite, VerifyReport};

use std::path::PathBuf;

use thiserror::Error;

/// Version tags written into the `schema` column of every CSV.
pub const CURVES_SCHEMA: &str = "curves/1";
pub const EPISODES_SCHEMA: &str = "episodes/1";
pub const EVAL_SCHEMA: &str = "eval/1";
pub const VERIFY_SCHEMA: &str = "verify/1";

/// Name of the method every other one is normalized against.
pub const BASELINE_METHOD: &str = "safe_rl";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing checkpoints: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingCheckpoints(Vec<PathBuf>),
    #[error("{file}: schema mismatch in column {column:?}: {detail}")]
    Schema {
        file: String,
        column: String,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Train(#[from] crate::safe_rl::TrainError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn create_dir(path: &std::path::Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<(), HarnessError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Serializes rows to RFC 4180 CSV with a header row.
pub(crate) fn write_csv<T: serde::Serialize>(path: &std::path::Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}
