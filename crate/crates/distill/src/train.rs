use serde::{Deserialize, Serialize};

use farskip_core::model::{ConnectivityMode, MaskSpec, Model, ModelConfig};
use farskip_core::Tape;

use crate::corpus::{Batcher, Corpus};
use crate::error::{DistillError, Divergence, Result};
use crate::eval::{self, EvalConfig, EvalProxy, ProxyScores};
use crate::log::{LogEntry, MetricLog, StopReason};
use crate::loss::{self, LossKind};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::schedule::LrSchedule;

fn default_delta() -> f64 {
    0.02
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_tokens: usize,
    /// Tokens per optimizer step; a multiple of `seq_len`.
    pub batch_tokens: usize,
    pub seq_len: usize,
    /// Overrides the step count derived from the token budget, so batch
    /// size can vary at a fixed number of steps.
    #[serde(default)]
    pub fixed_steps: Option<usize>,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    pub loss: LossKind,
    /// Parameter-name prefixes excluded from updates (e.g. `"embed"`).
    #[serde(default)]
    pub frozen: Vec<String>,
    pub eval_every: usize,
    pub patience: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.fixed_steps.unwrap_or(self.total_tokens / self.batch_tokens.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DistillError::Config(m));
        if self.seq_len == 0 || self.batch_tokens == 0 || self.batch_tokens % self.seq_len != 0 {
            return bad(format!("batch_tokens {} must be a positive multiple of seq_len {}", self.batch_tokens, self.seq_len));
        }
        if self.total_steps() == 0 {
            return bad("budget allows no optimizer steps".into());
        }
        if self.warmup_steps > self.total_steps() {
            return bad(format!("warmup {} exceeds {} steps", self.warmup_steps, self.total_steps()));
        }
        if let LossKind::KlL2 { lambda } = self.loss {
            if !(lambda >= 0.0) {
                return bad(format!("lambda {lambda} must be >= 0"));
            }
        }
        if self.patience == 0 || self.eval_every == 0 {
            return bad("patience and eval_every must be >= 1".into());
        }
        if !(self.peak_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad("need 0 <= min_lr <= peak_lr and peak_lr > 0".into());
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) || !(self.clip_norm > 0.0) {
            return bad("delta must lie in [0, 1) and clip_norm be positive".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak: self.peak_lr, min: self.min_lr, warmup: self.warmup_steps, total: self.total_steps() }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best proxy evaluation.
    pub best: Model,
    pub best_step: usize,
    pub best_scores: ProxyScores,
    /// Parameters after the last step taken.
    pub last: Model,
    pub steps_run: usize,
    pub stop: StopReason,
    pub proxy: EvalProxy,
}

/// Trains `student` (optionally against `teacher`) under `cfg`.
pub fn train(
    student: &Model,
    teacher: Option<&Model>,
    cfg: &TrainConfig,
    corpus: &Corpus,
    log: &mut MetricLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.seq_len > student.config.max_seq_len {
        return Err(DistillError::Config(format!(
            "seq_len {} exceeds model max_seq_len {}",
            cfg.seq_len, student.config.max_seq_len
        )));
    }
    if student.config.vocab < crate::corpus::VOCAB {
        return Err(DistillError::Config(format!("byte corpus needs vocab >= 256, got {}", student.config.vocab)));
    }
    if let Some(t) = teacher {
        loss::check_compatible(t, student)?;
    } else if cfg.loss.needs_teacher() {
        return Err(DistillError::Config("distillation loss configured without a teacher".into()));
    }
    let specs = &student.layout().specs;
    let trainable: Vec<bool> = specs.iter().map(|(n, _)| !cfg.frozen.iter().any(|f| n.starts_with(f.as_str()))).collect();
    let decay: Vec<bool> = specs.iter().map(|(n, _)| !n.ends_with("norm")).collect();

    let mut model = student.clone();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.params.tensors);
    let mut batcher = Batcher::new(&corpus.train, cfg.seq_len, cfg.batch_tokens / cfg.seq_len, cfg.seed)?;
    let schedule = cfg.schedule();
    let total = schedule.total;
    let mut proxy = EvalProxy::new(format!("{:?}", cfg.eval.metric), cfg.patience, cfg.delta);
    let mut best: Option<(Model, usize, ProxyScores)> = None;
    let mut stop = StopReason::Budget;
    let mut steps_run = 0;

    for step in 0..total {
        let lr = schedule.lr(step);
        let batch = batcher.next_batch();
        let targets = match (teacher, cfg.loss.needs_teacher()) {
            (Some(t), true) => Some(loss::teacher_targets(t, &batch)?),
            _ => None,
        };
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |i| trainable[i]);
        let (loss_var, _) = loss::record_loss(&mut tape, &model, &p, &batch, cfg.loss, targets.as_ref())?;
        let loss_value = tape.value(loss_var).item();
        let grads = tape.backward(loss_var)?;
        let mut g: Vec<Option<Vec<f64>>> = p
            .vars()
            .iter()
            .enumerate()
            .map(|(i, &v)| trainable[i].then(|| grads.get_or_zero(v).into_data()))
            .collect();
        let grad_norm = clip_global_norm(&mut g, cfg.clip_norm);
        if !loss_value.is_finite() || !grad_norm.is_finite() {
            let finite = |x: f64| x.is_finite().then_some(x);
            log.push(LogEntry::Abort { step, lr, loss: finite(loss_value), grad_norm: finite(grad_norm) })?;
            return Err(DistillError::Diverged(Divergence { step, lr, loss: loss_value, grad_norm }));
        }
        opt.step(&mut model.params.tensors, &g, lr, &decay);
        steps_run = step + 1;
        log.push(LogEntry::Step {
            step,
            loss: loss_value,
            lr,
            grad_norm,
            clipped: grad_norm > cfg.clip_norm,
            tokens: steps_run * batch.n_tokens(),
        })?;

        if steps_run % cfg.eval_every == 0 || steps_run == total {
            let scores = eval::evaluate(&model, &corpus.heldout, cfg.seq_len, &cfg.eval)?;
            let metric = scores.metric(cfg.eval.metric);
            let update = proxy.record(metric);
            log.push(LogEntry::Eval {
                step,
                heldout_loss: scores.heldout_loss,
                inverse_perplexity: scores.inverse_perplexity,
                exact_match: scores.exact_match,
                byte_accuracy: scores.byte_accuracy,
                metric,
                improved: update.improved,
                evals_since_best: proxy.evals_since_best,
            })?;
            if update.improved {
                best = Some((model.clone(), steps_run, scores));
            }
            if update.stop {
                stop = StopReason::EarlyStop;
                break;
            }
        }
    }
    log.push(LogEntry::Stop { step: steps_run, reason: stop })?;
    let (best, best_step, best_scores) = best.expect("the final step is always evaluated");
    Ok(TrainOutcome { best, best_step, best_scores, last: model, steps_run, stop, proxy })
}

/// Self-distillation: converts `teacher`'s masked layers to `target` and
/// trains the result against the unconverted teacher.
pub fn fcsd_train(
    teacher: &Model,
    mask: &MaskSpec,
    target: ConnectivityMode,
    cfg: &TrainConfig,
    corpus: &Corpus,
    log: &mut MetricLog,
) -> Result<TrainOutcome> {
    let student = teacher.convert(mask, target)?;
    train(&student, Some(teacher), cfg, corpus, log)
}

/// From-scratch language-model training with fixed per-layer modes.
pub fn pretrain(
    model_cfg: &ModelConfig,
    mode: ConnectivityMode,
    cfg: &TrainConfig,
    corpus: &Corpus,
    log: &mut MetricLog,
) -> Result<TrainOutcome> {
    if cfg.loss != LossKind::Sft {
        return Err(DistillError::Config("pretraining uses the sft loss".into()));
    }
    let model = Model::new(model_cfg.clone())?.with_modes(vec![mode; model_cfg.n_layers])?;
    train(&model, None, cfg, corpus, log)
}

/// Mean of the last `ceil(10%)` values (at least one).
pub fn final_window_mean(losses: &[f64]) -> Option<f64> {
    if losses.is_empty() {
        return None;
    }
    let n = losses.len().div_ceil(10);
    let tail = &losses[losses.len() - n..];
    Some(tail.iter().sum::<f64>() / n as f64)
}
