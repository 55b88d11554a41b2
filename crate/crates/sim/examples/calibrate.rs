//! Fits a comm-cost scale so a scenario reaches a target speedup.
//!
//! `cargo run -p farskip-sim --example calibrate -- <scenario.json> <target>`
//!
//! Training scenarios are fitted at the largest EP of their sweep; prefill
//! scenarios on their own profile. Prints the scaled hardware block.

use farskip_sim::scaling::{calibrate_scale, prefill_comparison, scale_comm, training_point};
use farskip_sim::{Scenario, ScenarioPass, ScheduleMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let [_, path, target] = args.as_slice() else {
        return Err("usage: calibrate <scenario.json> <target speedup>".into());
    };
    let sc = Scenario::load(path.as_ref())?;
    let target: f64 = target.parse()?;
    let w = sc.workload.clone().ok_or("scenario needs a workload")?;
    let mut hw = sc.hardware.clone().ok_or("scenario needs hardware")?;
    hw.contention = sc.contention();
    if let Some(&ep) = sc.ep_sweep.iter().max() {
        hw.ep = ep;
    }
    let baseline = sc.baseline.unwrap_or(ScheduleMode::Regular);
    let speedup = |s: f64| match sc.pass {
        ScenarioPass::Prefill => prefill_comparison(&w, &scale_comm(&hw, s)).map(|c| 1.0 + c.speedup),
        _ => training_point(&w, &scale_comm(&hw, s), baseline).map(|p| p.speedup),
    };
    let scale = calibrate_scale(speedup, target, 1e-3, 1e3, 1e-6)?;
    println!("scale {scale:.6} speedup {:.4}", speedup(scale)?);
    println!("{}", serde_json::to_string_pretty(&scale_comm(&hw, scale))?);
    if !sc.ep_sweep.is_empty() {
        let mut scaled = sc.clone();
        scaled.hardware = Some(scale_comm(&hw, scale));
        for p in scaled.sweep()? {
            println!("ep {:>3} speedup {:.4} feasible {} slack {:.1}", p.ep, p.speedup, p.bound.feasible, p.bound.slack);
        }
    }
    Ok(())
}
