//! TOML experiment configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use farskip_core::model::{ConnectivityMode, MaskSpec, ModelConfig};
use farskip_distill::eval::EvalConfig;
use farskip_distill::sweep::SweepAxis;
use farskip_distill::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds corpus synthesis and the held-out split; required.
    pub seed: u64,
    pub io: IoConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub convert: Option<ConvertConfig>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub generate: Option<GenerateConfig>,
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Byte-level text corpus; a synthetic one is generated when absent.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_synthetic_bytes")]
    pub synthetic_bytes: usize,
    /// Input checkpoint for distill, convert, eval, generate and sweep.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_synthetic_bytes() -> usize {
    1 << 20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// One from-scratch run per mode, same seed and budget.
    pub modes: Vec<ConnectivityMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertConfig {
    pub mask: MaskSpec,
    pub target: ConnectivityMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seq_len: usize,
    #[serde(default)]
    pub proxy: EvalConfig,
    /// Also score first-N and last-N conversions for every N.
    #[serde(default)]
    pub sensitivity: bool,
    #[serde(default = "hybrid")]
    pub sensitivity_target: ConnectivityMode,
}

fn hybrid() -> ConnectivityMode {
    ConnectivityMode::Hybrid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub prompt: String,
    pub n_new: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "one")]
    pub top_p: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Scenario JSON, relative to the config file.
    pub scenario: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub candidates: Vec<f64>,
    pub short_steps: usize,
    /// Distill from `io.checkpoint` after converting per `[convert]`;
    /// otherwise pretrain `[model]` from scratch.
    #[serde(default)]
    pub distill: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads the config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.io.out_dir);
        cfg.io.corpus.as_mut().map(fix);
        cfg.io.checkpoint.as_mut().map(fix);
        if let Some(s) = cfg.sim.as_mut() {
            fix(&mut s.scenario);
        }
        Ok(cfg)
    }
}

/// Unwraps a section a subcommand needs.
pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    section.as_ref().ok_or_else(|| CliError::Config(format!("missing [{name}] section")))
}
