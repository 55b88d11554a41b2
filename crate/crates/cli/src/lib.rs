//! Subcommand implementations behind the `farskip` binary.
//!
//! Every command writes into `io.out_dir`: the config file as given, the
//! resolved config as JSON, a `run.json` manifest, and a JSON file for each
//! result it prints.

pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use farskip_core::model::generate::{generate, SamplingConfig};
use farskip_core::model::{checkpoint, ConnectivityMode, MaskSpec, Model};
use farskip_distill::corpus::{ingest_corpus, synthetic_text, Corpus};
use farskip_distill::eval::{evaluate, heldout_loss};
use farskip_distill::log::MetricLog;
use farskip_distill::sweep::sweep;
use farskip_distill::train::{final_window_mean, fcsd_train, pretrain, TrainOutcome};
use farskip_sim::{trace, Scenario};

use config::{require, ExperimentConfig};

/// Config problems exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<farskip_distill::DistillError> for CliError {
    fn from(e: farskip_distill::DistillError) -> Self {
        match e {
            farskip_distill::DistillError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<farskip_core::Error> for CliError {
    fn from(e: farskip_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<farskip_sim::SimError> for CliError {
    fn from(e: farskip_sim::SimError) -> Self {
        match e {
            farskip_sim::SimError::Config(m) | farskip_sim::SimError::Format(m) => CliError::Config(m),
            other => CliError::Runtime(other.into()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Output directory of one run.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).context("serializing output")?;
        self.write_text(name, &(text + "\n"))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }

    fn manifest(&self, command: &str, seed: Option<u64>, source: Option<&str>, resolved: &impl Serialize) -> Result<()> {
        if let Some(text) = source {
            self.write_text("config.toml", text)?;
        }
        self.write_json("config.resolved.json", resolved)?;
        self.write_json("run.json", &json!({ "command": command, "seed": seed, "version": env!("CARGO_PKG_VERSION") }))
    }
}

/// A loaded config plus its original text.
pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub source: String,
}

impl Loaded {
    pub fn from_path(path: &Path) -> Result<Self> {
        let cfg = ExperimentConfig::load(path)?;
        let source = std::fs::read_to_string(path).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self { cfg, source })
    }

    fn run_dir(&self, command: &str, out: Option<&Path>) -> Result<RunDir> {
        let dir = RunDir::create(out.unwrap_or(&self.cfg.io.out_dir))?;
        dir.manifest(command, Some(self.cfg.seed), Some(&self.source), &self.cfg)?;
        Ok(dir)
    }

    fn corpus(&self) -> Result<Corpus> {
        let bytes = match &self.cfg.io.corpus {
            Some(p) => ingest_corpus(p)?,
            None => synthetic_text(self.cfg.io.synthetic_bytes, self.cfg.seed).into_bytes(),
        };
        Ok(Corpus::split(&bytes, self.cfg.seed)?)
    }

    fn checkpoint(&self) -> Result<(Model, serde_json::Value)> {
        let p = require(&self.cfg.io.checkpoint, "io.checkpoint")?;
        checkpoint::load(p).map_err(|e| CliError::Runtime(anyhow::anyhow!("loading {}: {e}", p.display())))
    }
}

fn save_model(dir: &RunDir, name: &str, model: &Model, meta: serde_json::Value) -> Result<()> {
    checkpoint::save(&dir.file(name), model, meta)?;
    Ok(())
}

fn outcome_summary(out: &TrainOutcome, log: &MetricLog) -> serde_json::Value {
    json!({
        "steps_run": out.steps_run,
        "stop": out.stop,
        "best_step": out.best_step,
        "best_scores": out.best_scores,
        "final_window_loss": final_window_mean(&log.step_losses()),
    })
}

pub fn cmd_pretrain(l: &Loaded, out: Option<&Path>) -> Result<serde_json::Value> {
    let dir = l.run_dir("pretrain", out)?;
    let model_cfg = require(&l.cfg.model, "model")?;
    let train_cfg = require(&l.cfg.train, "train")?;
    let modes = l.cfg.pretrain.as_ref().map_or_else(|| vec![ConnectivityMode::Regular, ConnectivityMode::Hybrid], |p| p.modes.clone());
    let corpus = l.corpus()?;
    let mut runs = serde_json::Map::new();
    for mode in &modes {
        let name = serde_json::to_value(mode).expect("mode serializes").as_str().expect("string").to_string();
        let sub = RunDir::create(&dir.file(&name))?;
        let mut log = MetricLog::append_to(&sub.file("metrics.jsonl"))?;
        let outcome = pretrain(model_cfg, *mode, train_cfg, &corpus, &mut log)?;
        let meta = json!({ "command": "pretrain", "mode": mode, "step": outcome.steps_run });
        save_model(&sub, "last.fskp", &outcome.last, meta.clone())?;
        save_model(&sub, "best.fskp", &outcome.best, meta)?;
        runs.insert(name, outcome_summary(&outcome, &log));
    }
    let losses: Vec<f64> = runs.values().filter_map(|r| r["final_window_loss"].as_f64()).collect();
    let gap = match losses.as_slice() {
        [a, b] => Some((b - a).abs() / a),
        _ => None,
    };
    let summary = json!({ "runs": runs, "relative_final_loss_gap": gap });
    dir.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn convert_cfg(l: &Loaded) -> Result<(MaskSpec, ConnectivityMode)> {
    let c = require(&l.cfg.convert, "convert")?;
    Ok((c.mask.clone(), c.target))
}

pub fn cmd_convert(l: &Loaded, out: Option<&Path>) -> Result<serde_json::Value> {
    let dir = l.run_dir("convert", out)?;
    let (model, _) = l.checkpoint()?;
    let (mask, target) = convert_cfg(l)?;
    let converted = model.convert(&mask, target)?;
    save_model(&dir, "converted.fskp", &converted, json!({ "command": "convert", "mask": mask, "target": target }))?;
    let summary = json!({ "modes": converted.modes });
    dir.write_json("summary.json", &summary)?;
    Ok(summary)
}

pub fn cmd_distill(l: &Loaded, out: Option<&Path>) -> Result<serde_json::Value> {
    let dir = l.run_dir("distill", out)?;
    let (teacher, _) = l.checkpoint()?;
    let (mask, target) = convert_cfg(l)?;
    let train_cfg = require(&l.cfg.train, "train")?;
    let corpus = l.corpus()?;
    let mut log = MetricLog::append_to(&dir.file("metrics.jsonl"))?;
    let outcome = fcsd_train(&teacher, &mask, target, train_cfg, &corpus, &mut log)?;
    let meta = json!({ "command": "distill", "loss": train_cfg.loss, "best_step": outcome.best_step });
    save_model(&dir, "best.fskp", &outcome.best, meta.clone())?;
    save_model(&dir, "last.fskp", &outcome.last, meta)?;
    let teacher_loss = heldout_loss(&teacher, &corpus.heldout, train_cfg.seq_len, train_cfg.eval.max_windows)?;
    let mut summary = outcome_summary(&outcome, &log);
    summary["teacher_heldout_loss"] = json!(teacher_loss);
    summary["loss_ratio"] = json!(outcome.best_scores.heldout_loss / teacher_loss);
    dir.write_json("summary.json", &summary)?;
    Ok(summary)
}

pub fn cmd_eval(l: &Loaded, out: Option<&Path>) -> Result<serde_json::Value> {
    let dir = l.run_dir("eval", out)?;
    let (model, _) = l.checkpoint()?;
    let e = require(&l.cfg.eval, "eval")?;
    let corpus = l.corpus()?;
    let scores = evaluate(&model, &corpus.heldout, e.seq_len, &e.proxy)?;
    let mut summary = json!({ "scores": scores });
    if e.sensitivity {
        let n_layers = model.config.n_layers;
        let mut rows = Vec::with_capacity(n_layers + 1);
        for n in 0..=n_layers {
            let loss = |mask| -> Result<f64> {
                let m = model.convert(&mask, e.sensitivity_target)?;
                Ok(heldout_loss(&m, &corpus.heldout, e.seq_len, e.proxy.max_windows)?)
            };
            rows.push(json!({ "n": n, "first_n": loss(MaskSpec::FirstN(n))?, "last_n": loss(MaskSpec::LastN(n))? }));
        }
        summary["sensitivity"] = json!(rows);
    }
    dir.write_json("eval.json", &summary)?;
    Ok(summary)
}

pub fn cmd_generate(l: &Loaded, out: Option<&Path>) -> Result<serde_json::Value> {
    let dir = l.run_dir("generate", out)?;
    let (model, _) = l.checkpoint()?;
    let g = require(&l.cfg.generate, "generate")?;
    let prompt: Vec<usize> = g.prompt.bytes().map(usize::from).collect();
    let cfg = SamplingConfig { temperature: g.temperature, top_p: g.top_p, seed: l.cfg.seed };
    let tokens = generate(&model, &prompt, g.n_new, &cfg)?;
    let bytes: Vec<u8> = tokens.iter().map(|&t| u8::try_from(t).unwrap_or(b'?')).collect();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let summary = json!({ "prompt": g.prompt, "tokens": tokens, "text": text });
    dir.write_text("generation.txt", &text)?;
    dir.write_json("generation.json", &summary)?;
    Ok(summary)
}

pub fn cmd_sweep(l: &Loaded, out: Option<&Path>) -> Result<serde_json::Value> {
    let dir = l.run_dir("sweep", out)?;
    let s = require(&l.cfg.sweep, "sweep")?;
    let train_cfg = require(&l.cfg.train, "train")?;
    let corpus = l.corpus()?;
    let report = if s.distill {
        let (teacher, _) = l.checkpoint()?;
        let (mask, target) = convert_cfg(l)?;
        let student = teacher.convert(&mask, target)?;
        sweep(&student, Some(&teacher), train_cfg, s.axis, &s.candidates, s.short_steps, &corpus)?
    } else {
        let model_cfg = require(&l.cfg.model, "model")?;
        let modes = l.cfg.pretrain.as_ref().and_then(|p| p.modes.first().copied()).unwrap_or(ConnectivityMode::Regular);
        let student = Model::new(model_cfg.clone())?.with_modes(vec![modes; model_cfg.n_layers])?;
        sweep(&student, None, train_cfg, s.axis, &s.candidates, s.short_steps, &corpus)?
    };
    let summary = serde_json::to_value(&report).context("serializing sweep")?;
    dir.write_json("sweep.json", &summary)?;
    Ok(summary)
}

/// Runs a scenario file: report JSON and table, traces, and the scaling
/// curve when the scenario lists EP sizes.
pub fn simulate_scenario(scenario_path: &Path, dir: &RunDir) -> Result<(serde_json::Value, String)> {
    let scenario = Scenario::load(scenario_path)?;
    let run = scenario.run()?;
    let table = run.report.table();
    let value = serde_json::to_value(&run).context("serializing report")?;
    dir.write_json("report.json", &value)?;
    dir.write_text("report.txt", &table)?;
    if let Some(tl) = &run.timeline {
        dir.write_text("trace.json", &trace::write_trace(tl))?;
    }
    if let Some(tl) = &run.baseline_timeline {
        dir.write_text("baseline_trace.json", &trace::write_trace(tl))?;
    }
    if !scenario.ep_sweep.is_empty() {
        dir.write_json("scaling.json", &scenario.sweep()?)?;
    }
    Ok((value, table))
}

pub fn cmd_simulate(l: &Loaded, out: Option<&Path>) -> Result<(serde_json::Value, String)> {
    let dir = l.run_dir("simulate", out)?;
    let s = require(&l.cfg.sim, "sim")?;
    simulate_scenario(&s.scenario, &dir)
}

/// `simulate --scenario` without an experiment config.
pub fn cmd_simulate_scenario(path: &Path, out: &Path) -> Result<(serde_json::Value, String)> {
    let dir = RunDir::create(out)?;
    let scenario = Scenario::load(path)?;
    dir.write_text("scenario.json", &std::fs::read_to_string(path).context("reading scenario")?)?;
    dir.manifest("simulate", None, None, &scenario)?;
    simulate_scenario(path, &dir)
}

/// Checkpoint passed on the command line overrides `io.checkpoint`.
pub fn override_checkpoint(l: &mut Loaded, ckpt: Option<PathBuf>) {
    if let Some(p) = ckpt {
        l.cfg.io.checkpoint = Some(p);
    }
}
