//! Append-only JSONL run log and ground-truth files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentPrediction, FinalDecision};
use crate::orchestrator::ReEvalTrace;

pub const RUN_LOG_FILE: &str = "runlog.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path} line {line}: {reason}")]
    Corrupt { path: String, line: usize, reason: String },
    #[error("missing log: {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Prediction(AgentPrediction),
    Trace(ReEvalTrace),
    Decision(FinalDecision),
}

/// Parsed contents of a run log, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub predictions: Vec<AgentPrediction>,
    pub traces: Vec<ReEvalTrace>,
    pub decisions: Vec<FinalDecision>,
}

impl RunLog {
    pub fn read(path: &Path) -> Result<Self, LogError> {
        if !path.exists() {
            return Err(LogError::Missing(path.display().to_string()));
        }
        let reader = BufReader::new(File::open(path)?);
        let mut log = RunLog::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LogRecord = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            log.push(record);
        }
        Ok(log)
    }

    pub fn push(&mut self, record: LogRecord) {
        match record {
            LogRecord::Prediction(p) => self.predictions.push(p),
            LogRecord::Trace(t) => self.traces.push(t),
            LogRecord::Decision(d) => self.decisions.push(d),
        }
    }

    /// Image ids whose processing finished, decided or not.
    pub fn completed_images(&self) -> BTreeSet<String> {
        self.decisions
            .iter()
            .map(|d| d.image_id.clone())
            .chain(self.traces.iter().filter(|t| t.undecided).map(|t| t.image_id.clone()))
            .collect()
    }

    pub fn agent_ids(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for p in &self.predictions {
            if !seen.contains(&p.agent_id) {
                seen.push(p.agent_id.clone());
            }
        }
        seen
    }
}

/// Single writer appending records to a run log. Opening an existing log
/// drops a trailing partial line left by an interrupted run.
#[derive(Debug)]
pub struct RunLogWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RunLogWriter {
    pub fn open(path: &Path) -> Result<Self, LogError> {
        if path.exists() {
            let bytes = fs::read(path)?;
            if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map(|i| i + 1).unwrap_or(0);
                log::warn!("{}: dropping {} bytes of a partial record", path.display(), bytes.len() - keep);
                fs::write(path, &bytes[..keep])?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<(), LogError> {
        let line = serde_json::to_string(record).map_err(|e| LogError::Corrupt {
            path: self.path.display().to_string(),
            line: 0,
            reason: e.to_string(),
        })?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), LogError> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub image_id: String,
    pub label: String,
}

pub fn write_truth(path: &Path, truth: &BTreeMap<String, String>) -> Result<(), LogError> {
    let mut out = BufWriter::new(File::create(path)?);
    for (image_id, label) in truth {
        let rec = TruthRecord { image_id: image_id.clone(), label: label.clone() };
        out.write_all(serde_json::to_string(&rec).expect("truth serializes").as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<BTreeMap<String, String>, LogError> {
    if !path.exists() {
        return Err(LogError::Missing(path.display().to_string()));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut truth = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TruthRecord = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        truth.insert(rec.image_id, rec.label);
    }
    Ok(truth)
}
