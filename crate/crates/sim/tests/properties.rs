use farskip_sim::build::*;
use farskip_sim::{overlap_bound, overlap_report, simulate, trace, OpDurations, ScheduleDAG};
use proptest::prelude::*;

fn durations() -> impl Strategy<Value = OpDurations> {
    // integer-valued durations keep sums exact so equalities are bitwise
    let t = || 0u32..20;
    (t(), t(), t(), t(), t(), t(), t(), t(), t(), 1u32..4).prop_map(|(g, di, q, c, r, co, s, ara, arm, bf)| OpDurations {
        gate: g as f64,
        dispatch: di as f64,
        attn_qkv: q as f64,
        attn_core: c as f64,
        routed_experts: r as f64,
        combine: co as f64,
        shared_expert: s as f64,
        allreduce_attn: ara as f64,
        allreduce_moe: arm as f64,
        norm: 1.0,
        backward_factor: bf as f64,
    })
}

fn contention() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), (0u32..=8).prop_map(|k| k as f64 / 8.0)]
}

fn schedules(n: usize, d: &OpDurations) -> Vec<(ScheduleDAG, ScheduleDAG)> {
    vec![
        (build_forward_schedule(n, ScheduleMode::Regular, d).unwrap(), build_forward_schedule(n, ScheduleMode::FarSkip, d).unwrap()),
        (
            build_training_schedule(n, ScheduleMode::Regular, BackwardPolicy::Naive, d).unwrap(),
            build_training_schedule(n, ScheduleMode::FarSkip, BackwardPolicy::Reprioritized, d).unwrap(),
        ),
        (
            build_inference_prefill_schedule(n, ScheduleMode::Regular, d).unwrap(),
            build_inference_prefill_schedule(n, ScheduleMode::FarSkip, d).unwrap(),
        ),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn simulator_invariants(d in durations(), n in 1usize..6, gamma in contention()) {
        for (regular, farskip) in schedules(n, &d) {
            let r = simulate(&regular, gamma).unwrap();
            let f = simulate(&farskip, gamma).unwrap();
            for tl in [&r, &f] {
                tl.check_exclusive().unwrap();
                let max_end = tl.events.iter().map(|e| e.end).fold(0.0, f64::max);
                prop_assert_eq!(tl.end_to_end, max_end);
                let mut ids: Vec<usize> = tl.events.iter().map(|e| e.node).collect();
                ids.dedup();
                prop_assert_eq!(ids.len(), tl.events.len());
            }
            prop_assert_eq!(regular.total_duration(), farskip.total_duration());
            prop_assert!(f.end_to_end <= r.end_to_end, "farskip {} > regular {}", f.end_to_end, r.end_to_end);
            prop_assert_eq!(&simulate(&farskip, gamma).unwrap(), &f);
            prop_assert_eq!(trace::write_trace(&f), trace::write_trace(&simulate(&farskip, gamma).unwrap()));
        }
        let z = d.with_zero_comm();
        for (regular, farskip) in schedules(n, &z) {
            prop_assert_eq!(simulate(&regular, 0.0).unwrap().end_to_end, simulate(&farskip, 0.0).unwrap().end_to_end);
        }
    }

    #[test]
    fn hidden_interior_collectives_satisfy_the_bound(d in durations(), n in 3usize..6) {
        let g = build_forward_schedule(n, ScheduleMode::FarSkip, &d).unwrap();
        let r = overlap_report(&simulate(&g, 0.0).unwrap(), None);
        let interior_hidden = r.collectives.iter().filter(|c| c.layer > 1 && c.layer < n).all(|c| c.exposed == 0.0);
        if interior_hidden && d.dispatch + d.combine > 0.0 {
            prop_assert!(overlap_bound(&d).feasible);
        }
    }

    #[test]
    fn traces_round_trip(d in durations(), n in 1usize..4) {
        let g = build_training_schedule(n, ScheduleMode::FarSkip, BackwardPolicy::Reprioritized, &d).unwrap();
        let text = trace::write_trace(&simulate(&g, 0.0).unwrap());
        let events = trace::parse_trace(&text).unwrap();
        prop_assert_eq!(events.len(), g.nodes.len() + 2);
    }
}

/// Collectives and ops are indivisible, so the bound can hold while the
/// dispatch window (attention core) and the combine window (shared expert
/// plus the next qkv) are each too small.
#[test]
fn bound_can_hold_with_exposed_interior_comm() {
    let d = OpDurations {
        gate: 1.0,
        dispatch: 3.0,
        attn_qkv: 2.0,
        attn_core: 2.0,
        routed_experts: 5.0,
        combine: 3.0,
        shared_expert: 2.0,
        allreduce_attn: 0.0,
        allreduce_moe: 0.0,
        norm: 0.0,
        backward_factor: 2.0,
    };
    assert!(overlap_bound(&d).feasible);
    let g = build_forward_schedule(3, ScheduleMode::FarSkip, &d).unwrap();
    let r = overlap_report(&simulate(&g, 0.0).unwrap(), None);
    let l2: Vec<f64> = r.collectives.iter().filter(|c| c.layer == 2).map(|c| c.exposed).collect();
    assert_eq!(l2, vec![1.0, 0.0]);
}
