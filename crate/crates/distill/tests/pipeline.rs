use farskip_core::model::{ConnectivityMode, MaskSpec, Model, ModelConfig};
use farskip_distill::corpus::{synthetic_text, Corpus};
use farskip_distill::eval::{EvalConfig, EvalProxy};
use farskip_distill::log::{parse_log, LogEntry, MetricLog, StopReason};
use farskip_distill::loss::LossKind;
use farskip_distill::sweep::{sweep, SweepAxis};
use farskip_distill::{fcsd_train, pretrain, train, TrainConfig};

fn model_cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        n_experts: 4,
        top_k: 2,
        expert_hidden: 16,
        shared_expert_hidden: 8,
        vocab: 256,
        max_seq_len: 16,
        seed: 3,
    }
}

fn corpus() -> Corpus {
    Corpus::split(synthetic_text(40_000, 1).as_bytes(), 9).unwrap()
}

fn train_cfg(steps: usize, loss: LossKind) -> TrainConfig {
    let warmup_steps = 4.min(steps);
    TrainConfig {
        total_tokens: steps * 128,
        batch_tokens: 128,
        seq_len: 16,
        fixed_steps: None,
        peak_lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps,
        optimizer: Default::default(),
        loss,
        frozen: vec![],
        eval_every: 10,
        patience: 3,
        delta: 0.02,
        eval: EvalConfig { max_windows: 8, n_prompts: 4, ..Default::default() },
        clip_norm: 1.0,
        seed: 5,
    }
}

#[test]
fn pretraining_lowers_loss_and_is_reproducible() {
    let c = corpus();
    let cfg = train_cfg(40, LossKind::Sft);
    let mut log = MetricLog::in_memory();
    let out = pretrain(&model_cfg(), ConnectivityMode::Hybrid, &cfg, &c, &mut log).unwrap();
    let losses = log.step_losses();
    assert_eq!(losses.len(), out.steps_run);
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head - 0.5, "{head} -> {tail}");
    assert!(out.last.modes.iter().all(|&m| m == ConnectivityMode::Hybrid));

    let mut again = MetricLog::in_memory();
    let out2 = pretrain(&model_cfg(), ConnectivityMode::Hybrid, &cfg, &c, &mut again).unwrap();
    assert!(out2.last.params.bit_eq(&out.last.params));
    assert_eq!(again.entries, log.entries);
}

#[test]
fn log_file_replays_the_stopping_decision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let c = corpus();
    let mut cfg = train_cfg(60, LossKind::Sft);
    cfg.eval_every = 5;
    cfg.patience = 2;
    let out = {
        let mut log = MetricLog::append_to(&path).unwrap();
        pretrain(&model_cfg(), ConnectivityMode::Regular, &cfg, &c, &mut log).unwrap()
    };
    let entries = parse_log(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let metrics: Vec<f64> = entries
        .iter()
        .filter_map(|e| match e {
            LogEntry::Eval { metric, .. } => Some(*metric),
            _ => None,
        })
        .collect();
    assert_eq!(metrics, out.proxy.history);
    let stopped_at = EvalProxy::replay(&metrics, cfg.patience, cfg.delta);
    match out.stop {
        StopReason::EarlyStop => assert_eq!(stopped_at, Some(metrics.len() - 1)),
        StopReason::Budget => assert_eq!(stopped_at, None),
    }
    assert!(matches!(entries.last(), Some(LogEntry::Stop { .. })));
}

#[test]
fn self_distillation_recovers_the_converted_model() {
    let c = corpus();
    let mut log = MetricLog::in_memory();
    let teacher = pretrain(&model_cfg(), ConnectivityMode::Regular, &train_cfg(40, LossKind::Sft), &c, &mut log).unwrap().last;
    let mut kl_log = MetricLog::in_memory();
    let out = fcsd_train(&teacher, &MaskSpec::All, ConnectivityMode::Hybrid, &train_cfg(30, LossKind::Kl), &c, &mut kl_log).unwrap();
    assert!(out.best.modes.iter().all(|&m| m == ConnectivityMode::Hybrid));
    let kl = kl_log.step_losses();
    assert!(kl[0] > 0.0);
    assert!(kl[kl.len() - 1] < kl[0], "{kl:?}");

    let with_l2 = train_cfg(3, LossKind::KlL2 { lambda: 0.5 });
    let student = teacher.convert(&MaskSpec::All, ConnectivityMode::Hybrid).unwrap();
    train(&student, Some(&teacher), &with_l2, &c, &mut MetricLog::in_memory()).unwrap();
    assert!(train(&student, None, &with_l2, &c, &mut MetricLog::in_memory()).is_err());
}

#[test]
fn frozen_parameters_do_not_move() {
    let c = corpus();
    let mut cfg = train_cfg(3, LossKind::Sft);
    cfg.frozen = vec!["embed".into(), "layers.0".into()];
    let model = Model::new(model_cfg()).unwrap();
    let out = train(&model, None, &cfg, &c, &mut MetricLog::in_memory()).unwrap();
    for ((name, _), (a, b)) in model.layout().specs.iter().zip(model.params.tensors.iter().zip(&out.last.params.tensors)) {
        let frozen = name == "embed" || name.starts_with("layers.0");
        assert_eq!(a == b, frozen, "{name}");
    }
}

#[test]
fn sweep_prefers_a_working_learning_rate() {
    let c = corpus();
    let model = Model::new(model_cfg()).unwrap();
    let report = sweep(&model, None, &train_cfg(20, LossKind::Sft), SweepAxis::Lr, &[1e-6, 3e-3], 12, &c).unwrap();
    assert_eq!(report.best, 3e-3);
    assert!(report.candidates.iter().all(|r| r.score.is_some()));
}
