//! JSON scenario files and their execution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::build::{
    build_backward_schedule, build_forward_schedule, build_inference_prefill_schedule, build_training_schedule,
    BackwardPolicy, ScheduleMode,
};
use crate::dag::ScheduleDAG;
use crate::error::{Result, SimError};
use crate::profile::{inference_durations, training_durations, HardwareProfile, OpDurations, Workload};
use crate::report::{overlap_bound, overlap_report, OverlapBound, OverlapReport};
use crate::scaling::{scaling_experiment, ScalingPoint};
use crate::simulate::{simulate, Timeline};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioPass {
    Forward,
    Backward,
    /// Forward then backward.
    Training,
    Prefill,
}

/// Either explicit per-op durations or a workload costed on a hardware
/// profile. Explicit durations need `n_layers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub notes: String,
    pub pass: ScenarioPass,
    pub mode: ScheduleMode,
    #[serde(default)]
    pub policy: BackwardPolicy,
    /// Mode of the comparison run; `regular` when absent.
    #[serde(default)]
    pub baseline: Option<ScheduleMode>,
    #[serde(default)]
    pub n_layers: Option<usize>,
    #[serde(default)]
    pub durations: Option<OpDurations>,
    #[serde(default)]
    pub workload: Option<Workload>,
    #[serde(default)]
    pub hardware: Option<HardwareProfile>,
    /// Overrides the hardware contention factor.
    #[serde(default)]
    pub contention: Option<f64>,
    /// EP sizes for a strong-scaling sweep of a training workload.
    #[serde(default)]
    pub ep_sweep: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub scenario: String,
    pub durations: OpDurations,
    pub n_layers: usize,
    pub bound: OverlapBound,
    pub report: OverlapReport,
    #[serde(skip)]
    pub timeline: Option<Timeline>,
    #[serde(skip)]
    pub baseline_timeline: Option<Timeline>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimError::Format(e.to_string()))?;
        s.resolve()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Layer count and durations after costing the workload if needed.
    pub fn resolve(&self) -> Result<(usize, OpDurations)> {
        let (n, d) = match (&self.durations, &self.workload, &self.hardware) {
            (Some(d), None, _) => {
                let n = self.n_layers.ok_or_else(|| SimError::Config("explicit durations need n_layers".into()))?;
                (n, d.clone())
            }
            (None, Some(w), Some(hw)) => {
                if self.n_layers.is_some_and(|n| n != w.n_layers) {
                    return Err(SimError::Config("n_layers disagrees with the workload".into()));
                }
                let d = match self.pass {
                    ScenarioPass::Prefill => inference_durations(w, hw)?,
                    _ => training_durations(w, hw)?,
                };
                (w.n_layers, d)
            }
            _ => return Err(SimError::Config("give either durations or workload plus hardware".into())),
        };
        if n == 0 {
            return Err(SimError::Config("n_layers must be positive".into()));
        }
        d.validate()?;
        if let Some(c) = self.contention {
            if !(0.0..=1.0).contains(&c) {
                return Err(SimError::Config("contention must lie in [0, 1]".into()));
            }
        }
        Ok((n, d))
    }

    pub fn contention(&self) -> f64 {
        self.contention.or(self.hardware.as_ref().map(|h| h.contention)).unwrap_or(0.0)
    }

    pub fn build(&self, mode: ScheduleMode) -> Result<ScheduleDAG> {
        let (n, d) = self.resolve()?;
        match self.pass {
            ScenarioPass::Forward => build_forward_schedule(n, mode, &d),
            // the baseline never benefits from reprioritization
            ScenarioPass::Backward => build_backward_schedule(n, mode, self.policy_for(mode), &d),
            ScenarioPass::Training => build_training_schedule(n, mode, self.policy_for(mode), &d),
            ScenarioPass::Prefill => build_inference_prefill_schedule(n, mode, &d),
        }
    }

    fn policy_for(&self, mode: ScheduleMode) -> BackwardPolicy {
        if mode == self.mode {
            self.policy
        } else {
            BackwardPolicy::Naive
        }
    }

    pub fn run(&self) -> Result<ScenarioRun> {
        let (n_layers, durations) = self.resolve()?;
        let gamma = self.contention();
        let timeline = simulate(&self.build(self.mode)?, gamma)?;
        let baseline_mode = self.baseline.unwrap_or(ScheduleMode::Regular);
        let baseline_timeline = simulate(&self.build(baseline_mode)?, gamma)?;
        let report = overlap_report(&timeline, Some(&baseline_timeline));
        Ok(ScenarioRun {
            scenario: self.name.clone(),
            bound: overlap_bound(&durations),
            durations,
            n_layers,
            report,
            timeline: Some(timeline),
            baseline_timeline: Some(baseline_timeline),
        })
    }

    /// Speedup of FarSkip training over the baseline for each EP size in
    /// `ep_sweep`.
    pub fn sweep(&self) -> Result<Vec<ScalingPoint>> {
        let (Some(w), Some(hw)) = (&self.workload, &self.hardware) else {
            return Err(SimError::Config("a sweep needs workload and hardware".into()));
        };
        if self.ep_sweep.is_empty() {
            return Err(SimError::Config("ep_sweep is empty".into()));
        }
        let mut hw = hw.clone();
        hw.contention = self.contention();
        scaling_experiment(w, &hw, &self.ep_sweep, self.baseline.unwrap_or(ScheduleMode::Regular))
    }
}
