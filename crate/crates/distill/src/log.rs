//! Append-only JSON-lines metric log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DistillError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogEntry {
    Step {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
        clipped: bool,
        tokens: usize,
    },
    Eval {
        step: usize,
        heldout_loss: f64,
        inverse_perplexity: f64,
        exact_match: f64,
        byte_accuracy: f64,
        metric: f64,
        improved: bool,
        evals_since_best: usize,
    },
    Stop {
        step: usize,
        reason: StopReason,
    },
    /// Non-finite values are written as `null`.
    Abort {
        step: usize,
        lr: f64,
        loss: Option<f64>,
        grad_norm: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    EarlyStop,
}

/// In-memory record of a run, optionally mirrored line by line to a file.
#[derive(Default)]
pub struct MetricLog {
    pub entries: Vec<LogEntry>,
    sink: Option<BufWriter<File>>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| DistillError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self { entries: Vec::new(), sink: Some(BufWriter::new(f)) })
    }

    pub fn push(&mut self, entry: LogEntry) -> Result<()> {
        if let Some(w) = &mut self.sink {
            let line = serde_json::to_string(&entry).map_err(|e| DistillError::Log(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| DistillError::Io(e.to_string()))?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn step_losses(&self) -> Vec<f64> {
        step_losses(&self.entries)
    }

    pub fn eval_metrics(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Eval { metric, .. } => Some(*metric),
                _ => None,
            })
            .collect()
    }
}

pub fn step_losses(entries: &[LogEntry]) -> Vec<f64> {
    entries
        .iter()
        .filter_map(|e| match e {
            LogEntry::Step { loss, .. } => Some(*loss),
            _ => None,
        })
        .collect()
}

pub fn parse_log(text: &str) -> Result<Vec<LogEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DistillError::Log(format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let a = LogEntry::Step { step: 0, loss: 5.5, lr: 1e-3, grad_norm: 2.0, clipped: true, tokens: 64 };
        let b = LogEntry::Abort { step: 1, lr: 1e-3, loss: None, grad_norm: Some(3.0) };
        MetricLog::append_to(&path).unwrap().push(a.clone()).unwrap();
        MetricLog::append_to(&path).unwrap().push(b.clone()).unwrap();
        let parsed = parse_log(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(parsed, vec![a, b]);
    }

    #[test]
    fn rejects_unknown_fields() {
        assert!(parse_log(r#"{"type":"stop","step":1,"reason":"budget","x":1}"#).is_err());
        assert!(parse_log("not json").is_err());
    }
}
