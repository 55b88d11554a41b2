//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//!
//! Pass criterion numbers or title words to run a subset:
//! `cargo test -p farskip-validation --test acceptance -- 7 8 trace`.

use std::process::ExitCode;

use farskip_validation::{numerics, simulator, training, Verdict};

const CRITERIA: &[(u32, &str, fn() -> Verdict)] = &[
    (1, "connectivity", numerics::connectivity),
    (2, "gradients", numerics::gradients),
    (3, "parallel_invariance", numerics::parallel_invariance),
    (4, "sensitivity", training::sensitivity),
    (5, "distillation", training::distillation),
    (6, "pretraining_parity", training::pretraining_parity),
    (7, "simulator_invariants", simulator::invariants),
    (8, "bound_cross_check", simulator::bound_cross_check),
    (9, "golden_replay", simulator::golden_replay),
    (10, "scenario_trends", simulator::scenario_trends),
    (11, "traces", simulator::traces),
];

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected = |id: u32, name: &str| {
        filters.is_empty() || filters.iter().any(|f| f.parse() == Ok(id) || name.contains(f.as_str()))
    };
    if args.iter().any(|a| a == "--list") {
        for &(id, name, _) in CRITERIA.iter().filter(|c| selected(c.0, c.1)) {
            println!("criterion_{id:02}_{name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let mut verdicts = Vec::new();
    for &(id, name, check) in CRITERIA {
        if selected(id, name) {
            let v = check();
            println!("{v}");
            verdicts.push(v);
        }
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    println!("\nacceptance: {} passed, {} failed {:?}", verdicts.len() - failed.len(), failed.len(), failed);
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
