//! Evaluation reports: per-scenario rows and column means, as JSON and as an
//! aligned text table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, DataError};
use crate::metrics::BenchmarkMode;
use crate::microworld::scene::{Archetype, Label};
use crate::training::{EvalRow, Planner};

pub const REPORT_COLUMNS: [&str; 12] = ["NC", "DAC", "DDC", "TLC", "EP", "TTC", "LK", "HC", "EC", "C", "PDMS", "EPDMS"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub archetype: Archetype,
    pub label: Label,
    pub valid: bool,
    /// Values in [`REPORT_COLUMNS`] order.
    pub values: Vec<f64>,
    pub ade: Option<f64>,
    pub reference_match: f64,
}

impl From<&EvalRow> for ReportRow {
    fn from(r: &EvalRow) -> Self {
        let mut values = r.report.subscores.to_array().to_vec();
        values.push(r.report.pdms);
        values.push(r.report.epdms);
        Self {
            id: r.id.clone(),
            archetype: r.archetype,
            label: r.label,
            valid: r.report.valid,
            values,
            ade: r.ade,
            reference_match: r.reference_match,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// `None` for externally supplied plans.
    pub planner: Option<Planner>,
    pub mode: BenchmarkMode,
    pub columns: Vec<String>,
    pub count: usize,
    /// Column means; empty when there are no rows.
    pub mean: Vec<f64>,
    /// Mean ADE over valid plans.
    pub mean_ade: Option<f64>,
    pub mean_reference_match: Option<f64>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(rows: &[EvalRow], planner: Option<Planner>, mode: BenchmarkMode) -> Self {
        let rows: Vec<ReportRow> = rows.iter().map(ReportRow::from).collect();
        let n = rows.len();
        let mean = if n == 0 {
            Vec::new()
        } else {
            (0..REPORT_COLUMNS.len()).map(|c| rows.iter().map(|r| r.values[c]).sum::<f64>() / n as f64).collect()
        };
        let ades: Vec<f64> = rows.iter().filter_map(|r| r.ade).collect();
        let mean_ade = (!ades.is_empty()).then(|| ades.iter().sum::<f64>() / ades.len() as f64);
        let mean_reference_match = (n > 0).then(|| rows.iter().map(|r| r.reference_match).sum::<f64>() / n as f64);
        Self {
            schema_version: 1,
            planner,
            mode,
            columns: REPORT_COLUMNS.iter().map(|s| s.to_string()).collect(),
            count: n,
            mean,
            mean_ade,
            mean_reference_match,
            rows,
        }
    }

    pub fn column(&self, name: &str) -> Option<f64> {
        REPORT_COLUMNS.iter().position(|c| *c == name).and_then(|i| self.mean.get(i).copied())
    }

    /// Aligned text table: one line per scenario, then the mean.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<28}", "scenario");
        for c in REPORT_COLUMNS {
            let _ = write!(s, " {c:>6}");
        }
        let _ = writeln!(s, " {:>6}", "ADE");
        let fmt_row = |s: &mut String, name: &str, vals: &[f64], ade: Option<f64>| {
            let _ = write!(s, "{name:<28}");
            for v in vals {
                let _ = write!(s, " {v:>6.3}");
            }
            match ade {
                Some(a) => {
                    let _ = writeln!(s, " {a:>6.3}");
                }
                None => {
                    let _ = writeln!(s, " {:>6}", "-");
                }
            }
        };
        for r in &self.rows {
            fmt_row(&mut s, &r.id, &r.values, r.ade);
        }
        if !self.mean.is_empty() {
            fmt_row(&mut s, "mean", &self.mean, self.mean_ade);
        }
        s
    }
}

/// Path of the text table written next to a JSON report.
pub fn table_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".txt");
    PathBuf::from(p)
}

/// Write the JSON report at `path` and the table at `path` + `.txt`.
pub fn write_report(report: &Report, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(report)? + "\n";
    write_atomic(path, json.as_bytes())?;
    write_atomic(&table_path(path), report.to_table().as_bytes())
}

pub fn read_report(path: &Path) -> Result<Report, DataError> {
    let s = std::fs::read_to_string(path).map_err(|e| DataError::Open { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&s).map_err(|e| DataError::Malformed { line: e.line(), msg: e.to_string() })
}
