//! End-to-end runs over a manifest: VOI extraction, Dice and robustness
//! evaluation, location-stratified aggregation and paired model
//! comparison.

mod compare;
mod eval;
mod extract;
mod manifest;
mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use compare::{compare_models, ComparisonOutcome, Metric, DEFAULT_ALPHA};
pub use eval::{
    read_records_csv, read_run_dir, run_dice_eval, run_robustness_eval, write_records_csv, write_run_dir, EvalConfig,
    EvalRecord, Flag, RunKind, RunMetadata, RECORD_CSV_COLUMNS,
};
pub use extract::{extract_vois, ExtractIndex, ExtractedSample};
pub use manifest::{load_manifest, split_patients, test_patient_count, Manifest, ManifestEntry, UNDEFINED_LOCATION};
pub use report::{
    aggregate_by_location, emit_report, normalize_location, GroupStats, MeanStd, ReportFormat, StratifiedReport,
    SummaryCell, SummaryRow,
};

use crate::clicks::ClickError;
use crate::lesions::LesionError;
use crate::metrics::MetricError;
use crate::segmenter::SegmenterError;
use crate::voi::VoiError;
use crate::volume::VolumeError;

pub const WORKERS_ENV: &str = "ULSFORGE_WORKERS";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("duplicate lesion ids: {}", .0.join(", "))]
    DuplicateLesionId(Vec<String>),
    #[error("invalid manifest entry: {0}")]
    InvalidEntry(String),
    #[error("referenced files do not exist: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFile(Vec<PathBuf>),
    #[error("manifest has no patients")]
    NoPatients,
    #[error("no records to aggregate")]
    EmptyRecords,
    #[error("runs cover different lesions (only in A: [{}]; only in B: [{}])", .only_a.join(", "), .only_b.join(", "))]
    PairingMismatch { only_a: Vec<String>, only_b: Vec<String> },
    #[error("metric '{0}' missing from some records")]
    MissingMetric(String),
    #[error("lesion '{lesion_id}': {reason}")]
    Lesion { lesion_id: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Voi(#[from] VoiError),
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error(transparent)]
    Click(#[from] ClickError),
    #[error(transparent)]
    LesionOp(#[from] LesionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serde(String),
}

/// Worker count: explicit value, else `ULSFORGE_WORKERS`, else the number
/// of available cores.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}
