use serde::{Deserialize, Serialize};

use farskip_core::model::Model;

use crate::corpus::Corpus;
use crate::error::{DistillError, Result};
use crate::log::MetricLog;
use crate::train::{final_window_mean, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Tokens per step.
    BatchSize,
    Lr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub value: f64,
    /// Mean training loss over the final 10% of steps.
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub candidates: Vec<CandidateResult>,
    pub best: f64,
}

/// Runs every candidate for `short_steps` and picks the lowest final-window
/// training loss; ties go to the smaller value, then to the earlier entry.
pub fn sweep(
    student: &Model,
    teacher: Option<&Model>,
    base: &TrainConfig,
    axis: SweepAxis,
    candidates: &[f64],
    short_steps: usize,
    corpus: &Corpus,
) -> Result<SweepReport> {
    if candidates.is_empty() {
        return Err(DistillError::Config("sweep needs at least one candidate".into()));
    }
    let mut results = Vec::with_capacity(candidates.len());
    for &value in candidates {
        let mut cfg = base.clone();
        cfg.fixed_steps = Some(short_steps);
        cfg.warmup_steps = cfg.warmup_steps.min(short_steps);
        cfg.eval_every = short_steps;
        match axis {
            SweepAxis::Lr => {
                cfg.peak_lr = value;
                cfg.min_lr = cfg.min_lr.min(value);
            }
            SweepAxis::BatchSize => cfg.batch_tokens = value as usize,
        }
        let mut log = MetricLog::in_memory();
        let outcome = train(student, teacher, &cfg, corpus, &mut log);
        results.push(match outcome {
            Ok(_) => CandidateResult { value, score: final_window_mean(&log.step_losses()), error: None },
            Err(e) => CandidateResult { value, score: None, error: Some(e.to_string()) },
        });
    }
    let best = results
        .iter()
        .filter_map(|r| r.score.map(|s| (s, r.value)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .map(|(_, v)| v)
        .ok_or_else(|| DistillError::Contract("every sweep candidate failed".into()))?;
    Ok(SweepReport { axis, candidates: results, best })
}
