//! Strong-scaling sweeps, prefill comparisons and comm-cost calibration.

use serde::{Deserialize, Serialize};

use crate::build::{build_inference_prefill_schedule, build_training_schedule, BackwardPolicy, ScheduleMode};
use crate::error::{Result, SimError};
use crate::profile::{inference_durations, training_durations, HardwareProfile, OpDurations, Workload};
use crate::report::{overlap_bound, OverlapBound};
use crate::simulate::simulate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub ep: usize,
    pub baseline_us: f64,
    pub farskip_us: f64,
    pub speedup: f64,
    pub bound: OverlapBound,
}

/// Training step time (forward + backward) under the given schedule.
pub fn training_step_us(n_layers: usize, d: &OpDurations, mode: ScheduleMode, policy: BackwardPolicy, contention: f64) -> Result<f64> {
    let g = build_training_schedule(n_layers, mode, policy, d)?;
    Ok(simulate(&g, contention)?.end_to_end)
}

pub fn training_point(w: &Workload, hw: &HardwareProfile, baseline: ScheduleMode) -> Result<ScalingPoint> {
    let d = training_durations(w, hw)?;
    let base = training_step_us(w.n_layers, &d, baseline, BackwardPolicy::Naive, hw.contention)?;
    let far = training_step_us(w.n_layers, &d, ScheduleMode::FarSkip, BackwardPolicy::Reprioritized, hw.contention)?;
    Ok(ScalingPoint { ep: hw.ep, baseline_us: base, farskip_us: far, speedup: base / far, bound: overlap_bound(&d) })
}

/// Fixed per-rank batch, varying EP: more ranks per expert group means
/// fuller expert GEMMs and more all-to-all traffic leaving the node.
pub fn scaling_experiment(w: &Workload, hw: &HardwareProfile, eps: &[usize], baseline: ScheduleMode) -> Result<Vec<ScalingPoint>> {
    eps.iter()
        .map(|&ep| {
            if ep == 0 || w.n_experts % ep != 0 {
                return Err(SimError::Config(format!("ep {ep} does not divide {} experts", w.n_experts)));
            }
            training_point(w, &HardwareProfile { ep, ..hw.clone() }, baseline)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefillComparison {
    pub regular_us: f64,
    pub farskip_us: f64,
    /// Relative time-to-first-token reduction, `regular / farskip - 1`.
    pub speedup: f64,
}

pub fn prefill_comparison(w: &Workload, hw: &HardwareProfile) -> Result<PrefillComparison> {
    let d = inference_durations(w, hw)?;
    let run = |mode| -> Result<f64> {
        let g = build_inference_prefill_schedule(w.n_layers, mode, &d)?;
        Ok(simulate(&g, hw.contention)?.end_to_end)
    };
    let regular_us = run(ScheduleMode::Regular)?;
    let farskip_us = run(ScheduleMode::FarSkip)?;
    Ok(PrefillComparison { regular_us, farskip_us, speedup: regular_us / farskip_us - 1.0 })
}

/// Multiplies every collective latency and inverse bandwidth by `scale`.
pub fn scale_comm(hw: &HardwareProfile, scale: f64) -> HardwareProfile {
    HardwareProfile {
        intra_alpha: hw.intra_alpha * scale,
        intra_beta: hw.intra_beta * scale,
        inter_alpha: hw.inter_alpha * scale,
        inter_beta: hw.inter_beta * scale,
        ..hw.clone()
    }
}

/// Finds the comm scale at which `speedup(scale)` first reaches `target`
/// scanning upwards from `lo`, then bisects to `tol`. Speedup rises with
/// comm cost until overlap saturates, so the first crossing is used.
pub fn calibrate_scale(mut speedup: impl FnMut(f64) -> Result<f64>, target: f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    if !(lo > 0.0 && hi > lo) {
        return Err(SimError::Config("calibration range must be positive and increasing".into()));
    }
    let steps = 200;
    let ratio = (hi / lo).powf(1.0 / steps as f64);
    let mut prev = lo;
    if speedup(lo)? >= target {
        return Ok(lo);
    }
    for i in 1..=steps {
        let s = lo * ratio.powi(i);
        if speedup(s)? >= target {
            let (mut a, mut b) = (prev, s);
            while b / a - 1.0 > tol {
                let mid = (a * b).sqrt();
                if speedup(mid)? >= target {
                    b = mid;
                } else {
                    a = mid;
                }
            }
            return Ok(b);
        }
        prev = s;
    }
    Err(SimError::Config(format!("speedup {target} unreachable on [{lo}, {hi}]")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_hits_monotone_target() {
        let s = calibrate_scale(|x| Ok(1.0 + x / (1.0 + x)), 1.3, 1e-3, 1e3, 1e-9).unwrap();
        // 1 + s/(1+s) = 1.3 at s = 3/7
        assert!((s - 3.0 / 7.0).abs() < 1e-6);
        assert!(calibrate_scale(|_| Ok(1.0), 1.2, 1e-3, 1e3, 1e-6).is_err());
    }
}
