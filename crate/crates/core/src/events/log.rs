//! Line-delimited JSON event logs.
//!
//! One `CompletionEvent` object per line. A synthetic dataset additionally
//! starts with a `{"dataset_meta": {...}}` line so provenance and seed
//! survive a round trip.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{label, CompletionEvent, Dataset, EventError, Provenance};

const META_KEY: &str = "dataset_meta";

const REQUIRED_FIELDS: &[&str] = &[
    "prefix",
    "suffix",
    "timestamp",
    "time_since_last_completion",
    "document_length",
    "cursor_offset",
    "language",
    "ide",
    "invocation_kind",
    "verdict",
    "user_id",
];

const OPTIONAL_FIELDS: &[&str] = &["ground_truth", "completion", "session_hint"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogMode {
    /// Unknown fields are rejected; the first bad line aborts the read.
    #[default]
    Strict,
    /// Unknown fields are ignored; bad lines become diagnostics.
    Lenient,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },
    #[error("line {line}: unknown field `{field}`")]
    UnknownField { line: usize, field: String },
    #[error("line {line}: {source}")]
    Invariant {
        line: usize,
        #[source]
        source: EventError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl LogError {
    pub fn line(&self) -> Option<usize> {
        match self {
            LogError::Parse { line, .. }
            | LogError::MissingField { line, .. }
            | LogError::UnknownField { line, .. }
            | LogError::Invariant { line, .. } => Some(*line),
            LogError::Io(_) => None,
        }
    }
}

/// Result of a log read: the dataset plus per-line diagnostics (only
/// populated in lenient mode).
#[derive(Debug)]
pub struct LogRead {
    pub dataset: Dataset,
    pub diagnostics: Vec<LogError>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

pub fn read_log(path: impl AsRef<Path>, mode: LogMode) -> Result<LogRead, LogError> {
    let text = fs::read_to_string(path)?;
    read_log_str(&text, mode)
}

pub fn read_log_str(text: &str, mode: LogMode) -> Result<LogRead, LogError> {
    let mut samples = Vec::new();
    let mut diagnostics = Vec::new();
    let mut provenance = Provenance::RealLog;
    let mut seed = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(raw, line_no, mode, samples.is_empty() && diagnostics.is_empty());
        match parsed {
            Ok(Line::Meta(meta)) => {
                provenance = meta.provenance;
                seed = meta.seed;
            }
            Ok(Line::Event(ev)) => samples.push(label(*ev)),
            Err(e) => match mode {
                LogMode::Strict => return Err(e),
                LogMode::Lenient => {
                    log::warn!("skipping log line: {e}");
                    diagnostics.push(e);
                }
            },
        }
    }
    Ok(LogRead {
        dataset: Dataset {
            samples,
            provenance,
            seed,
        },
        diagnostics,
    })
}

enum Line {
    Meta(DatasetMeta),
    Event(Box<CompletionEvent>),
}

fn parse_line(raw: &str, line: usize, mode: LogMode, first: bool) -> Result<Line, LogError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| LogError::Parse {
        line,
        message: e.to_string(),
    })?;
    let Value::Object(obj) = value else {
        return Err(LogError::Parse {
            line,
            message: "expected a JSON object".into(),
        });
    };
    if let Some(meta) = obj.get(META_KEY) {
        if mode == LogMode::Strict && !first {
            return Err(LogError::UnknownField {
                line,
                field: META_KEY.into(),
            });
        }
        let meta: DatasetMeta = serde_json::from_value(meta.clone()).map_err(|e| LogError::Parse {
            line,
            message: e.to_string(),
        })?;
        return Ok(Line::Meta(meta));
    }
    check_fields(&obj, line, mode)?;
    let event: CompletionEvent =
        serde_json::from_value(Value::Object(obj)).map_err(|e| LogError::Parse {
            line,
            message: e.to_string(),
        })?;
    event
        .validate()
        .map_err(|source| LogError::Invariant { line, source })?;
    Ok(Line::Event(Box::new(event)))
}

fn check_fields(obj: &Map<String, Value>, line: usize, mode: LogMode) -> Result<(), LogError> {
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(*field) {
            return Err(LogError::MissingField {
                line,
                field: (*field).into(),
            });
        }
    }
    if mode == LogMode::Strict {
        if let Some(k) = obj
            .keys()
            .find(|k| !REQUIRED_FIELDS.contains(&k.as_str()) && !OPTIONAL_FIELDS.contains(&k.as_str()))
        {
            return Err(LogError::UnknownField {
                line,
                field: k.clone(),
            });
        }
    }
    Ok(())
}

pub fn write_log_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    if dataset.provenance == Provenance::Synthetic {
        let meta = serde_json::json!({
            META_KEY: DatasetMeta { provenance: dataset.provenance, seed: dataset.seed }
        });
        out.push_str(&meta.to_string());
        out.push('\n');
    }
    for s in &dataset.samples {
        // CompletionEvent only holds strings, integers and enums
        out.push_str(&serde_json::to_string(&s.event).expect("event serializes"));
        out.push('\n');
    }
    out
}

pub fn write_log(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), LogError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(write_log_string(dataset).as_bytes())?;
    f.flush()?;
    Ok(())
}
