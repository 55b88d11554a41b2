use std::path::PathBuf;

use farskip_sim::build::{build_backward_schedule, BackwardPolicy, ScheduleMode};
use farskip_sim::scaling::prefill_comparison;
use farskip_sim::{overlap_report, simulate, Scenario};

fn load(name: &str) -> Scenario {
    Scenario::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)).unwrap()
}

#[test]
fn strong_scaling_grows_to_calibrated_target() {
    let points = load("dsv3_like_scaling.json").sweep().unwrap();
    assert_eq!(points.iter().map(|p| p.ep).collect::<Vec<_>>(), vec![8, 16, 32]);
    assert!(points.windows(2).all(|w| w[1].speedup > w[0].speedup));
    let last = points.last().unwrap().speedup;
    assert!((last - 1.22).abs() <= 0.1, "speedup {last}");
}

#[test]
fn prefill_gains_more_with_fewer_experts() {
    let ttft = |name| {
        let s = load(name);
        prefill_comparison(s.workload.as_ref().unwrap(), s.hardware.as_ref().unwrap()).unwrap().speedup
    };
    let (llama, dsv2) = (ttft("llama4_scout_like_prefill.json"), ttft("dsv2_like_prefill.json"));
    for s in [llama, dsv2] {
        assert!((0.05..=0.25).contains(&s), "ttft speedup {s}");
    }
    assert!(llama > dsv2);
}

#[test]
fn reprioritized_backward_exposes_less() {
    let s = load("dsv2_lite_like_training.json");
    let (n, d) = s.resolve().unwrap();
    let exposed = |policy| {
        let g = build_backward_schedule(n, ScheduleMode::FarSkip, policy, &d).unwrap();
        overlap_report(&simulate(&g, 0.0).unwrap(), None).total_exposed
    };
    assert!(exposed(BackwardPolicy::Naive) > exposed(BackwardPolicy::Reprioritized));
}

#[test]
fn every_checked_in_scenario_runs() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let run = Scenario::load(&path).unwrap().run().unwrap();
        assert!(run.report.speedup.unwrap() >= 1.0, "{}", path.display());
    }
}
