//! Criteria 7-11: simulator invariants, the overlap bound, the golden
//! replay, calibrated scenario trends and trace validity.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use farskip_sim::build::{
    build_backward_schedule, build_forward_schedule, build_inference_prefill_schedule, build_training_schedule,
    BackwardPolicy, ScheduleMode,
};
use farskip_sim::scaling::prefill_comparison;
use farskip_sim::{overlap_bound, overlap_report, simulate, trace, OpDurations, Scenario, ScheduleDAG, Timeline};

use crate::{err, timed, Verdict};

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../sim/scenarios")
}

fn load(name: &str) -> Result<Scenario, String> {
    Scenario::load(&scenarios_dir().join(name)).map_err(err)
}

/// Integer-valued durations so sums compare exactly.
pub fn random_profile(rng: &mut impl Rng) -> OpDurations {
    let mut t = || rng.gen_range(0..20) as f64;
    let d = OpDurations {
        gate: t(),
        dispatch: t(),
        attn_qkv: t(),
        attn_core: t(),
        routed_experts: t(),
        combine: t(),
        shared_expert: t(),
        allreduce_attn: t(),
        allreduce_moe: t(),
        norm: 1.0,
        backward_factor: 1.0,
    };
    OpDurations { backward_factor: rng.gen_range(1..4) as f64, ..d }
}

fn schedule_pairs(n: usize, d: &OpDurations) -> Result<Vec<(ScheduleDAG, ScheduleDAG)>, String> {
    let pair = |r: farskip_sim::Result<ScheduleDAG>, f: farskip_sim::Result<ScheduleDAG>| -> Result<_, String> {
        Ok((r.map_err(err)?, f.map_err(err)?))
    };
    Ok(vec![
        pair(build_forward_schedule(n, ScheduleMode::Regular, d), build_forward_schedule(n, ScheduleMode::FarSkip, d))?,
        pair(
            build_training_schedule(n, ScheduleMode::Regular, BackwardPolicy::Naive, d),
            build_training_schedule(n, ScheduleMode::FarSkip, BackwardPolicy::Reprioritized, d),
        )?,
        pair(
            build_inference_prefill_schedule(n, ScheduleMode::Regular, d),
            build_inference_prefill_schedule(n, ScheduleMode::FarSkip, d),
        )?,
    ])
}

/// Every node runs exactly once; without contention each event lasts its
/// nominal duration, with contention no event is shorter (up to rounding
/// in the piecewise-rate integration).
fn work_conserved(g: &ScheduleDAG, tl: &Timeline, gamma: f64) -> bool {
    let mut seen = vec![false; g.nodes.len()];
    for e in &tl.events {
        if std::mem::replace(&mut seen[e.node], true) {
            return false;
        }
        let nominal = g.nodes[e.node].duration;
        let ok = if gamma == 0.0 { e.duration() == nominal } else { e.duration() >= nominal - 1e-12 * e.end.max(1.0) };
        if !ok {
            return false;
        }
    }
    seen.iter().all(|&s| s)
}

pub fn invariants() -> Verdict {
    timed(7, "simulator invariant suite", Some(Duration::from_secs(60)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut violations = Vec::new();
        for i in 0..1000 {
            let d = random_profile(&mut rng);
            let n = rng.gen_range(1..6);
            let gamma = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0..=8) as f64 / 8.0 };
            let mut fail = |what: &str| violations.push(format!("profile {i} (L={n}, gamma={gamma}): {what}"));
            for (regular, farskip) in schedule_pairs(n, &d)? {
                let r = simulate(&regular, gamma).map_err(err)?;
                let f = simulate(&farskip, gamma).map_err(err)?;
                if r.check_exclusive().is_err() || f.check_exclusive().is_err() {
                    fail("stream exclusivity");
                }
                if !work_conserved(&regular, &r, gamma) || !work_conserved(&farskip, &f, gamma) {
                    fail("work conservation");
                }
                if f.end_to_end > r.end_to_end {
                    fail("farskip slower than regular");
                }
                if simulate(&farskip, gamma).map_err(err)? != f {
                    fail("nondeterminism");
                }
            }
            for (regular, farskip) in schedule_pairs(n, &d.with_zero_comm())? {
                if simulate(&regular, 0.0).map_err(err)?.end_to_end != simulate(&farskip, 0.0).map_err(err)?.end_to_end {
                    fail("zero-comm end-to-end differs");
                }
            }
        }
        let detail = match violations.first() {
            None => "1000 random profiles x {forward, training, prefill}: all invariants hold".into(),
            Some(v) => format!("{} violations; first {v}", violations.len()),
        };
        Ok((violations.is_empty(), detail))
    })
}

pub fn bound_cross_check() -> Verdict {
    timed(8, "overlap bound cross-check", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut agree, mut feasible_exposed, mut infeasible_hidden) = (0, 0, 0);
        let mut example = None;
        for _ in 0..200 {
            let d = OpDurations { dispatch: rng.gen_range(1..20) as f64, combine: rng.gen_range(1..20) as f64, ..random_profile(&mut rng) };
            let n = rng.gen_range(3..7);
            let g = build_forward_schedule(n, ScheduleMode::FarSkip, &d).map_err(err)?;
            let report = overlap_report(&simulate(&g, 0.0).map_err(err)?, None);
            let hidden = report.collectives.iter().filter(|c| c.layer > 1 && c.layer < n).all(|c| c.exposed == 0.0);
            let feasible = overlap_bound(&d).feasible;
            match (feasible, hidden) {
                (true, false) => {
                    feasible_exposed += 1;
                    example.get_or_insert_with(|| {
                        format!(
                            "qkv {} core {} shared {} dispatch {} combine {}",
                            d.attn_qkv, d.attn_core, d.shared_expert, d.dispatch, d.combine
                        )
                    });
                }
                (false, true) => infeasible_hidden += 1,
                _ => agree += 1,
            }
        }
        let mut detail = format!(
            "{agree}/200 agree; bound holds but interior comm exposed: {feasible_exposed}; bound fails but all hidden: {infeasible_hidden}"
        );
        if let Some(e) = example {
            detail.push_str(&format!("; e.g. {e} (ops are indivisible, so the summed bound is necessary but not sufficient)"));
        }
        Ok((agree == 200, detail))
    })
}

pub fn golden_replay() -> Verdict {
    timed(9, "golden schedule replay", None, || {
        let run = load("golden_l2.json")?.run().map_err(err)?;
        let frozen: serde_json::Value =
            serde_json::from_str(include_str!("../../sim/tests/golden/golden_l2_report.json")).map_err(err)?;
        let matches_frozen = serde_json::to_value(&run).map_err(err)? == frozen;
        let hidden: Vec<f64> = run.report.collectives.iter().map(|c| c.hidden).collect();
        let exposed: Vec<f64> = run.report.collectives.iter().map(|c| c.exposed).collect();
        let hand = run.report.end_to_end == 35.0 && hidden == [3.0, 3.0, 3.0, 0.0] && exposed == [0.0, 0.0, 0.0, 3.0];
        let detail = format!(
            "end-to-end {}, hidden {hidden:?}, exposed {exposed:?}; frozen report {}",
            run.report.end_to_end,
            if matches_frozen { "identical" } else { "differs" }
        );
        Ok((matches_frozen && hand, detail))
    })
}

pub fn scenario_trends() -> Verdict {
    timed(10, "calibrated scenario trends", None, || {
        let points = load("dsv3_like_scaling.json")?.sweep().map_err(err)?;
        let monotone = points.windows(2).all(|w| w[1].speedup > w[0].speedup);
        let last = points.last().ok_or("empty EP sweep")?;
        let scaling_ok = monotone && last.ep == 32 && (last.speedup - 1.2).abs() <= 0.1;
        let curve: Vec<String> = points.iter().map(|p| format!("EP{} {:.3}x", p.ep, p.speedup)).collect();

        let prefill = |name: &str| -> Result<(usize, f64), String> {
            let s = load(name)?;
            let w = s.workload.as_ref().ok_or("prefill scenario without workload")?;
            let hw = s.hardware.as_ref().ok_or("prefill scenario without hardware")?;
            Ok((w.n_experts, prefill_comparison(w, hw).map_err(err)?.speedup))
        };
        let mut ttft = [prefill("llama4_scout_like_prefill.json")?, prefill("dsv2_like_prefill.json")?];
        ttft.sort_by_key(|&(experts, _)| experts);
        let in_band = ttft.iter().all(|&(_, s)| (0.05..=0.25).contains(&s));
        let prefill_ok = in_band && ttft[0].1 > ttft[1].1;

        let s = load("dsv2_lite_like_training.json")?;
        let (n, d) = s.resolve().map_err(err)?;
        let exposed = |policy| -> Result<f64, String> {
            let g = build_backward_schedule(n, ScheduleMode::FarSkip, policy, &d).map_err(err)?;
            Ok(overlap_report(&simulate(&g, 0.0).map_err(err)?, None).total_exposed)
        };
        let (naive, reprio) = (exposed(BackwardPolicy::Naive)?, exposed(BackwardPolicy::Reprioritized)?);
        let backward_ok = reprio < naive;

        let detail = format!(
            "(a) {} [{}]; (b) TTFT +{:.1}% ({} experts) vs +{:.1}% ({} experts) [{}]; (c) exposed backward comm {naive:.0}us naive vs {reprio:.0}us reprioritized [{}]",
            curve.join(", "),
            ok(scaling_ok),
            100.0 * ttft[0].1,
            ttft[0].0,
            100.0 * ttft[1].1,
            ttft[1].0,
            ok(prefill_ok),
            ok(backward_ok),
        );
        Ok((scaling_ok && prefill_ok && backward_ok, detail))
    })
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

/// Same-lane intervals may touch but not overlap; `ts + dur` may round an
/// ulp past the true end.
fn lanes_disjoint(value: &serde_json::Value) -> bool {
    let mut spans: Vec<(u64, u64, f64, f64)> = value
        .as_array()
        .into_iter()
        .flatten()
        .filter(|e| e["ph"] == "X")
        .filter_map(|e| {
            let ts = e["ts"].as_f64()?;
            Some((e["pid"].as_u64()?, e["tid"].as_u64()?, ts, ts + e["dur"].as_f64()?))
        })
        .collect();
    spans.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)).then(a.2.total_cmp(&b.2)).then(a.3.total_cmp(&b.3)));
    spans.windows(2).all(|w| (w[0].0, w[0].1) != (w[1].0, w[1].1) || w[1].2 >= w[0].3 - 1e-12 * w[0].3.max(1.0))
}

pub fn traces() -> Verdict {
    timed(11, "trace validity", None, || {
        let schema_text = include_str!("../../sim/schema/trace_event_format.schema.json");
        let schema = jsonschema::JSONSchema::compile(&serde_json::from_str(schema_text).map_err(err)?).map_err(err)?;
        let mut timelines = Vec::new();
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(scenarios_dir()).map_err(err)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>().map_err(err)?;
        entries.sort();
        for path in &entries {
            let run = Scenario::load(path).map_err(err)?.run().map_err(err)?;
            timelines.extend(run.timeline);
            timelines.extend(run.baseline_timeline);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let d = random_profile(&mut rng);
            let n = rng.gen_range(1..5);
            for (r, f) in schedule_pairs(n, &d)? {
                timelines.push(simulate(&r, 0.0).map_err(err)?);
                timelines.push(simulate(&f, 0.25).map_err(err)?);
            }
        }
        let mut bad = Vec::new();
        for (i, tl) in timelines.iter().enumerate() {
            let text = trace::write_trace(tl);
            let value: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
            if !schema.is_valid(&value) {
                bad.push(format!("trace {i}: schema"));
            }
            if let Err(e) = trace::parse_trace(&text) {
                bad.push(format!("trace {i}: {e}"));
            }
            if !lanes_disjoint(&value) {
                bad.push(format!("trace {i}: same-stream overlap"));
            }
        }
        let detail = match bad.first() {
            None => format!("{} traces ({} scenarios + random schedules): schema-valid, parse, disjoint lanes", timelines.len(), entries.len()),
            Some(b) => format!("{} problems; first {b}", bad.len()),
        };
        Ok((bad.is_empty(), detail))
    })
}

