//! Scenario files, plan files, recipe streams, checkpoints and evaluation
//! reports.

pub mod checkpoint;
pub mod dataset;
pub mod plans;
pub mod recipe;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{dataset_to_string, read_dataset, read_dataset_from, write_dataset, write_json_line};
pub use plans::{read_plans, write_plans, PlanRecord};
pub use recipe::sample_recipe;
pub use report::{read_report, table_path, write_report, Report, ReportRow, REPORT_COLUMNS};

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}")]
    Open { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: schema version {found}, expected {expected}")]
    Schema { line: usize, found: u32, expected: u32 },
    #[error("file ends without a trailer after {records} records (last complete: {})", last.as_deref().unwrap_or("none"))]
    Truncated { records: usize, last: Option<String> },
    #[error("config: {0}")]
    Config(String),
    #[error("config hash {given} differs from checkpoint's {stored}")]
    ConfigMismatch { stored: String, given: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("recipe: {0}")]
    Recipe(String),
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
