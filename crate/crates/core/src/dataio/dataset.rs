//! Line-delimited scenario files.
//!
//! Layout: one header line, one record per scenario, one trailer carrying the
//! record count. Floats are written in shortest round-trip decimal form, so a
//! read reproduces every field bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, DataError};
use crate::microworld::scene::Scenario;

pub const DATASET_FORMAT: &str = "flowdrive-scenarios";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    schema_version: u32,
    units: Units,
}

/// Units of every stored quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub length: String,
    pub angle: String,
    pub time: String,
    pub speed: String,
}

impl Default for Units {
    fn default() -> Self {
        Self { length: "m".into(), angle: "rad".into(), time: "s".into(), speed: "m/s".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema_version: u32,
    scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Line {
    Header(Header),
    Record(Box<Record>),
    Trailer(Trailer),
}

/// Serialize scenarios to the line format.
pub fn dataset_to_string(scenarios: &[Scenario]) -> Result<String, DataError> {
    let mut out = String::new();
    let header = Line::Header(Header {
        format: DATASET_FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        units: Units::default(),
    });
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');
    for s in scenarios {
        let rec = Line::Record(Box::new(Record { schema_version: SCHEMA_VERSION, scenario: s.clone() }));
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&Line::Trailer(Trailer { count: scenarios.len() }))?);
    out.push('\n');
    Ok(out)
}

pub fn write_dataset(scenarios: &[Scenario], path: &Path) -> Result<(), DataError> {
    write_atomic(path, dataset_to_string(scenarios)?.as_bytes())
}

fn check_version(v: u32, line: usize) -> Result<(), DataError> {
    if v != SCHEMA_VERSION {
        return Err(DataError::Schema { line, found: v, expected: SCHEMA_VERSION });
    }
    Ok(())
}

/// Parse the line format from any reader.
pub fn read_dataset_from(reader: impl BufRead) -> Result<Vec<Scenario>, DataError> {
    let mut scenarios: Vec<Scenario> = Vec::new();
    let mut seen_header = false;
    let mut trailer = None;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if trailer.is_some() {
            return Err(DataError::Malformed { line: n, msg: "content after trailer".into() });
        }
        let parsed: Line =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed { line: n, msg: e.to_string() })?;
        match parsed {
            Line::Header(h) if !seen_header => {
                if h.format != DATASET_FORMAT {
                    return Err(DataError::Malformed { line: n, msg: format!("unknown format {:?}", h.format) });
                }
                check_version(h.schema_version, n)?;
                seen_header = true;
            }
            _ if !seen_header => return Err(DataError::Malformed { line: n, msg: "missing header".into() }),
            Line::Header(_) => return Err(DataError::Malformed { line: n, msg: "duplicate header".into() }),
            Line::Record(r) => {
                check_version(r.schema_version, n)?;
                scenarios.push(r.scenario);
            }
            Line::Trailer(t) => trailer = Some((t.count, n)),
        }
    }
    let last = scenarios.last().map(|s| s.id.clone());
    match trailer {
        Some((count, _)) if count == scenarios.len() => Ok(scenarios),
        Some((count, line)) => Err(DataError::Malformed {
            line,
            msg: format!("trailer announces {count} records, found {}", scenarios.len()),
        }),
        None if !seen_header => Err(DataError::Truncated { records: 0, last: None }),
        None => Err(DataError::Truncated { records: scenarios.len(), last }),
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<Scenario>, DataError> {
    let f = File::open(path).map_err(|e| DataError::Open { path: path.display().to_string(), source: e })?;
    read_dataset_from(BufReader::new(f))
}

/// Write anything serializable as one JSON line.
pub fn write_json_line(w: &mut impl Write, value: &impl Serialize) -> Result<(), DataError> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}
