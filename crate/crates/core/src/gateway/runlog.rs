//! Append-only JSONL log of every completion request and response.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::prompt::TemplateKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub timestamp: DateTime<Utc>,
    pub template_kind: TemplateKind,
    pub bundle_hash: String,
    pub rendered_prompt: String,
    pub completion: String,
    pub latency_seconds: f64,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    /// Evaluation pass this call belongs to, e.g. `ablation/diverticulitis/full`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<String>,
    #[serde(default)]
    pub slots: BTreeMap<String, String>,
}

enum Sink {
    File { path: PathBuf, file: Mutex<File> },
    Memory(Mutex<Vec<LogRecord>>),
}

/// Serialized appender. Each record is flushed before `append` returns.
pub struct RunLog {
    sink: Sink,
}

impl RunLog {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            sink: Sink::File {
                path,
                file: Mutex::new(file),
            },
        })
    }

    pub fn in_memory() -> Self {
        Self {
            sink: Sink::Memory(Mutex::new(Vec::new())),
        }
    }

    pub fn append(&self, record: &LogRecord) -> std::io::Result<()> {
        match &self.sink {
            Sink::File { file, .. } => {
                let mut line = serde_json::to_string(record)?;
                line.push('\n');
                let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
                f.write_all(line.as_bytes())?;
                f.flush()
            }
            Sink::Memory(records) => {
                records.lock().unwrap_or_else(|p| p.into_inner()).push(record.clone());
                Ok(())
            }
        }
    }

    /// Snapshot of everything logged so far.
    pub fn records(&self) -> std::io::Result<Vec<LogRecord>> {
        match &self.sink {
            Sink::File { path, file } => {
                let _guard = file.lock().unwrap_or_else(|p| p.into_inner());
                read_log(path)
            }
            Sink::Memory(records) => Ok(records.lock().unwrap_or_else(|p| p.into_inner()).clone()),
        }
    }
}

pub fn read_log(path: impl AsRef<Path>) -> std::io::Result<Vec<LogRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Distinct evaluation passes recorded under `prefix`.
pub fn passes_with_prefix(records: &[LogRecord], prefix: &str) -> Vec<String> {
    let mut passes: Vec<String> = records
        .iter()
        .filter_map(|r| r.pass.as_deref())
        .filter(|p| p.starts_with(prefix))
        .map(str::to_string)
        .collect();
    passes.sort();
    passes.dedup();
    passes
}
