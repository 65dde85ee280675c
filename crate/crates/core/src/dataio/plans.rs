//! Plan files: one `{"id", "trajectory"}` object per line, matched to
//! scenarios by id.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, DataError};
use crate::microworld::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRecord {
    pub id: String,
    pub trajectory: Trajectory<f64>,
}

pub fn write_plans(plans: &[PlanRecord], path: &Path) -> Result<(), DataError> {
    let mut s = String::new();
    for p in plans {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Blank lines are skipped.
pub fn read_plans(path: &Path) -> Result<Vec<PlanRecord>, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::Open { path: path.display().to_string(), source: e })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PlanRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed { line: i + 1, msg: e.to_string() })?;
        rec.trajectory.validate().map_err(|e| DataError::Malformed { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}
