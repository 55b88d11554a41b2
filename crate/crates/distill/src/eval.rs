use serde::{Deserialize, Serialize};

use farskip_core::model::generate::argmax;
use farskip_core::model::Model;
use farskip_core::Tape;

use crate::corpus::{eval_windows, Batch};
use crate::error::Result;

/// Which held-out score drives best-checkpoint selection and early stopping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyMetric {
    /// `exp(−heldout loss)`.
    #[default]
    InversePerplexity,
    /// Fraction of prompts whose greedy continuation matches exactly.
    ExactMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: ProxyMetric,
    /// Held-out windows scored for the loss.
    pub max_windows: usize,
    /// Greedy-continuation prompts.
    pub n_prompts: usize,
    pub continuation: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { metric: ProxyMetric::InversePerplexity, max_windows: 64, n_prompts: 16, continuation: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyScores {
    pub heldout_loss: f64,
    pub inverse_perplexity: f64,
    pub exact_match: f64,
    pub byte_accuracy: f64,
}

impl ProxyScores {
    pub fn metric(&self, which: ProxyMetric) -> f64 {
        match which {
            ProxyMetric::InversePerplexity => self.inverse_perplexity,
            ProxyMetric::ExactMatch => self.exact_match,
        }
    }
}

/// Mean next-token cross-entropy over the given windows.
pub fn loss_on(model: &Model, windows: &[Batch]) -> Result<f64> {
    const CHUNK: usize = 16;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(CHUNK) {
        let seq_len = chunk[0].seq_len;
        let tokens: Vec<usize> = chunk.iter().flat_map(|b| b.tokens.iter().copied()).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|b| b.targets.iter().copied()).collect();
        let mask = vec![true; targets.len()];
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |_| false);
        let fwd = model.forward(&mut tape, &p, &tokens, seq_len)?;
        let loss = tape.cross_entropy(fwd.logits, &targets, &mask)?;
        total += tape.value(loss).item() * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count.max(1) as f64)
}

pub fn heldout_loss(model: &Model, heldout: &[u8], seq_len: usize, max_windows: usize) -> Result<f64> {
    loss_on(model, &eval_windows(heldout, seq_len, max_windows))
}

/// Greedy continuation of evenly spaced held-out prompts; returns
/// `(exact-match rate, per-byte accuracy)`.
pub fn continuation_scores(
    model: &Model,
    heldout: &[u8],
    seq_len: usize,
    n_prompts: usize,
    continuation: usize,
) -> Result<(f64, f64)> {
    let ctx = seq_len.saturating_sub(continuation).max(1);
    let span = ctx + continuation;
    if n_prompts == 0 || heldout.len() < span {
        return Ok((0.0, 0.0));
    }
    let stride = ((heldout.len() - span) / n_prompts).max(1);
    let starts: Vec<usize> = (0..n_prompts).map(|i| i * stride).filter(|&s| s + span <= heldout.len()).collect();
    let mut seqs: Vec<Vec<usize>> = starts.iter().map(|&s| heldout[s..s + ctx].iter().map(|&b| b as usize).collect()).collect();
    for _ in 0..continuation {
        let len = seqs[0].len();
        let window = len.min(model.config.max_seq_len);
        let tokens: Vec<usize> = seqs.iter().flat_map(|s| s[len - window..].iter().copied()).collect();
        let logits = model.logits(&tokens, window)?;
        for (i, s) in seqs.iter_mut().enumerate() {
            s.push(argmax(logits.row(i * window + window - 1)));
        }
    }
    let mut exact = 0usize;
    let mut correct = 0usize;
    for (s, &start) in seqs.iter().zip(&starts) {
        let truth = &heldout[start + ctx..start + span];
        let hits = s[ctx..].iter().zip(truth).filter(|(a, b)| **a == **b as usize).count();
        correct += hits;
        exact += usize::from(hits == continuation);
    }
    let n = seqs.len() as f64;
    Ok((exact as f64 / n, correct as f64 / (n * continuation as f64)))
}

pub fn evaluate(model: &Model, heldout: &[u8], seq_len: usize, cfg: &EvalConfig) -> Result<ProxyScores> {
    let heldout_loss = heldout_loss(model, heldout, seq_len, cfg.max_windows)?;
    let (exact_match, byte_accuracy) = continuation_scores(model, heldout, seq_len, cfg.n_prompts, cfg.continuation)?;
    Ok(ProxyScores { heldout_loss, inverse_perplexity: (-heldout_loss).exp(), exact_match, byte_accuracy })
}

/// Higher-is-better proxy tracker with patience-based early stopping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProxy {
    pub task: String,
    pub history: Vec<f64>,
    pub best: Option<f64>,
    pub best_index: Option<usize>,
    pub evals_since_best: usize,
    pub patience: usize,
    /// Relative degradation below the best that counts as a real drop.
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProxyUpdate {
    pub improved: bool,
    pub stop: bool,
}

impl EvalProxy {
    pub fn new(task: impl Into<String>, patience: usize, delta: f64) -> Self {
        Self {
            task: task.into(),
            history: Vec::new(),
            best: None,
            best_index: None,
            evals_since_best: 0,
            patience,
            delta,
        }
    }

    pub fn record(&mut self, value: f64) -> ProxyUpdate {
        self.history.push(value);
        let improved = self.best.map_or(true, |b| value > b);
        if improved {
            self.best = Some(value);
            self.best_index = Some(self.history.len() - 1);
            self.evals_since_best = 0;
        } else {
            self.evals_since_best += 1;
        }
        let best = self.best.expect("set above");
        let stop = self.evals_since_best >= self.patience && value < best * (1.0 - self.delta);
        ProxyUpdate { improved, stop }
    }

    /// Index of the evaluation at which `history` triggers early stopping.
    pub fn replay(history: &[f64], patience: usize, delta: f64) -> Option<usize> {
        let mut p = EvalProxy::new("replay", patience, delta);
        history.iter().position(|&v| p.record(v).stop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_only_after_patience_and_real_drop() {
        let mut p = EvalProxy::new("t", 2, 0.02);
        assert!(p.record(1.0).improved);
        // within delta of the best: never stops
        assert!(!p.record(0.99).stop);
        assert!(!p.record(0.985).stop);
        assert!(!p.record(0.99).stop);
        // a real drop after patience is exhausted
        assert!(p.record(0.9).stop);
        assert_eq!(EvalProxy::replay(&p.history, 2, 0.02), Some(4));
    }

    #[test]
    fn improvement_resets_patience() {
        let mut p = EvalProxy::new("t", 1, 0.0);
        p.record(0.5);
        assert!(p.record(0.6).improved);
        assert_eq!(p.evals_since_best, 0);
        assert!(p.record(0.1).stop);
        assert_eq!(p.best_index, Some(1));
    }
}
