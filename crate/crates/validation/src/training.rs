//! Criteria 4-6: conversion sensitivity, self-distillation recovery and
//! pretraining parity, trained on a 5 MB synthetic byte corpus.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use farskip_core::model::{ConnectivityMode, MaskSpec, Model, ModelConfig};
use farskip_distill::corpus::{synthetic_text, Corpus};
use farskip_distill::eval::{heldout_loss, EvalConfig};
use farskip_distill::log::MetricLog;
use farskip_distill::loss::LossKind;
use farskip_distill::train::final_window_mean;
use farskip_distill::{pretrain, train, TrainConfig};

use crate::{err, timed, Verdict};

const CORPUS_BYTES: usize = 5 << 20;
const SEQ_LEN: usize = 64;
/// Held-out windows scored per conversion in the sensitivity sweep.
const SENSITIVITY_WINDOWS: usize = 512;
/// Allowed per-step decrease of the sensitivity curve.
const NOISE_NATS: f64 = 0.02;

pub const TEACHER_TOKENS: usize = 2_500_000;
pub const DISTILL_TOKENS: usize = 150_000;
pub const PARITY_TOKENS: usize = 3_000_000;

fn model_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 64,
        n_heads: 4,
        head_dim: 16,
        n_experts: 8,
        top_k: 2,
        expert_hidden: 64,
        shared_expert_hidden: 64,
        vocab: 256,
        max_seq_len: SEQ_LEN,
        seed: 17,
    }
}

fn train_config(tokens: usize, peak_lr: f64, warmup_steps: usize, loss: LossKind) -> TrainConfig {
    TrainConfig {
        total_tokens: tokens,
        batch_tokens: 8 * SEQ_LEN,
        seq_len: SEQ_LEN,
        fixed_steps: None,
        peak_lr,
        min_lr: peak_lr / 10.0,
        warmup_steps,
        optimizer: Default::default(),
        loss,
        frozen: vec![],
        eval_every: 250,
        patience: 4,
        delta: 0.02,
        eval: EvalConfig { max_windows: 256, n_prompts: 16, ..Default::default() },
        clip_norm: 1.0,
        seed: 23,
    }
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| Corpus::split(synthetic_text(CORPUS_BYTES, 2024).as_bytes(), 5).expect("non-empty corpus"))
}

struct Teacher {
    model: Model,
    heldout_loss: f64,
    steps: usize,
    elapsed: Duration,
}

/// The L=8 regular model shared by criteria 4 and 5, trained once.
fn teacher() -> Result<&'static Teacher, String> {
    static TEACHER: OnceLock<Result<Teacher, String>> = OnceLock::new();
    TEACHER
        .get_or_init(|| {
            let start = Instant::now();
            let cfg = train_config(TEACHER_TOKENS, 3e-3, 100, LossKind::Sft);
            let out = pretrain(&model_config(8), ConnectivityMode::Regular, &cfg, corpus(), &mut MetricLog::in_memory())
                .map_err(err)?;
            let heldout_loss = heldout_loss(&out.best, &corpus().heldout, SEQ_LEN, SENSITIVITY_WINDOWS).map_err(err)?;
            Ok(Teacher { model: out.best, heldout_loss, steps: out.steps_run, elapsed: start.elapsed() })
        })
        .as_ref()
        .map_err(Clone::clone)
}

pub fn sensitivity() -> Verdict {
    timed(4, "conversion sensitivity (first-N vs last-N)", Some(Duration::from_secs(2 * 3600)), || {
        let t = teacher()?;
        let n_layers = t.model.config.n_layers;
        let curve = |mask: fn(usize) -> MaskSpec| -> Result<Vec<f64>, String> {
            (0..=n_layers)
                .map(|n| {
                    let m = t.model.convert(&mask(n), ConnectivityMode::Hybrid).map_err(err)?;
                    heldout_loss(&m, &corpus().heldout, SEQ_LEN, SENSITIVITY_WINDOWS).map_err(err)
                })
                .collect()
        };
        let first = curve(MaskSpec::FirstN)?;
        let last = curve(MaskSpec::LastN)?;
        let monotone = |c: &[f64]| c.windows(2).all(|w| w[1] >= w[0] - NOISE_NATS);
        let first_worse = first[4] - first[0] >= last[4] - last[0];
        let fmt = |c: &[f64]| c.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>().join(" ");
        let detail = format!(
            "teacher {} steps in {:.0}s; first-N [{}]; last-N [{}]; N=4 degradation first {:+.3} vs last {:+.3}",
            t.steps,
            t.elapsed.as_secs_f64(),
            fmt(&first),
            fmt(&last),
            first[4] - first[0],
            last[4] - last[0],
        );
        Ok((monotone(&first) && monotone(&last) && first_worse, detail))
    })
}

pub fn distillation() -> Verdict {
    timed(5, "self-distillation recovery", Some(Duration::from_secs(2 * 3600)), || {
        let t = teacher()?;
        let student = t.model.convert(&MaskSpec::All, ConnectivityMode::Hybrid).map_err(err)?;
        let converted = heldout_loss(&student, &corpus().heldout, SEQ_LEN, SENSITIVITY_WINDOWS).map_err(err)?;
        let run = |loss| -> Result<f64, String> {
            let cfg = train_config(DISTILL_TOKENS, 1e-3, 50, loss);
            let out = train(&student, Some(&t.model), &cfg, corpus(), &mut MetricLog::in_memory()).map_err(err)?;
            heldout_loss(&out.best, &corpus().heldout, SEQ_LEN, SENSITIVITY_WINDOWS).map_err(err)
        };
        let kl = run(LossKind::Kl)?;
        let sft = run(LossKind::Sft)?;
        let ratio = kl / t.heldout_loss;
        let detail = format!(
            "teacher {:.4}, converted {converted:.4}, KL-distilled {kl:.4} ({ratio:.4}x teacher), SFT {sft:.4}",
            t.heldout_loss
        );
        Ok((ratio <= 1.05 && kl < sft, detail))
    })
}

pub fn pretraining_parity() -> Verdict {
    timed(6, "pretraining parity (regular vs hybrid)", Some(Duration::from_secs(3600)), || {
        let run = |mode| -> Result<f64, String> {
            let mut cfg = train_config(PARITY_TOKENS, 3e-3, 100, LossKind::Sft);
            // one evaluation at the end; both runs take the full budget
            cfg.eval_every = cfg.total_steps();
            let mut log = MetricLog::in_memory();
            pretrain(&model_config(4), mode, &cfg, corpus(), &mut log).map_err(err)?;
            final_window_mean(&log.step_losses()).ok_or_else(|| "no steps".to_string())
        };
        let regular = run(ConnectivityMode::Regular)?;
        let hybrid = run(ConnectivityMode::Hybrid)?;
        let gap = (hybrid - regular).abs() / regular;
        let detail = format!(
            "{PARITY_TOKENS} tokens each, L=4: final training loss regular {regular:.4}, hybrid {hybrid:.4}, gap {:.2}%",
            100.0 * gap
        );
        Ok((gap <= 0.02, detail))
    })
}
