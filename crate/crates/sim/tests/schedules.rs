use farskip_sim::build::*;
use farskip_sim::{overlap_bound, overlap_report, simulate, OpDurations, OpKind, Pass, Stream};

fn golden() -> OpDurations {
    OpDurations {
        gate: 1.0,
        dispatch: 3.0,
        attn_qkv: 2.0,
        attn_core: 4.0,
        routed_experts: 5.0,
        combine: 3.0,
        shared_expert: 4.0,
        allreduce_attn: 0.0,
        allreduce_moe: 0.0,
        norm: 0.0,
        backward_factor: 2.0,
    }
}

#[test]
fn single_layer_combine_feeds_only_the_norm() {
    let g = build_forward_schedule(1, ScheduleMode::FarSkip, &golden()).unwrap();
    let combine = g.find(OpKind::CombineA2a, 1, Pass::Fwd).unwrap();
    let norm = g.find(OpKind::Norm, 0, Pass::Fwd).unwrap();
    assert_eq!(g.successors(combine).collect::<Vec<_>>(), vec![norm]);
    let r = overlap_report(&simulate(&g, 0.0).unwrap(), None);
    let c = r.collectives.iter().find(|c| c.node == combine).unwrap();
    assert_eq!(c.hidden, 0.0);
    // the dispatch still overlaps attention core
    assert_eq!(r.end_to_end, 22.0 - 3.0);
    let regular = simulate(&build_forward_schedule(1, ScheduleMode::Regular, &golden()).unwrap(), 0.0).unwrap();
    assert_eq!(regular.end_to_end, 22.0);
}

#[test]
fn three_layer_edge_counts() {
    // per layer: qkv->core, gate->dispatch->routed->combine, gate->shared;
    // regular adds core->gate and the combine->shared sync, farskip adds
    // five cross-layer edges where regular adds two; three edges into norm
    let d = golden();
    let count = |mode| {
        let g = build_forward_schedule(3, mode, &d).unwrap();
        (g.nodes.len(), g.edges.len())
    };
    assert_eq!(count(ScheduleMode::FarSkip), (22, 5 * 3 + 5 * 2 + 3));
    assert_eq!(count(ScheduleMode::Regular), (22, 7 * 3 + 2 * 2 + 3));
    assert_eq!(count(ScheduleMode::RegularPlus), (22, 6 * 3 + 2 * 2 + 3));
}

#[test]
fn regular_forward_never_overlaps() {
    let g = build_forward_schedule(4, ScheduleMode::Regular, &golden()).unwrap();
    let r = overlap_report(&simulate(&g, 0.0).unwrap(), None);
    assert_eq!(r.total_hidden, 0.0);
    assert_eq!(r.end_to_end, 4.0 * 22.0);
}

#[test]
fn regular_plus_hides_combine_under_shared() {
    let g = build_forward_schedule(2, ScheduleMode::RegularPlus, &golden()).unwrap();
    let r = overlap_report(&simulate(&g, 0.0).unwrap(), None);
    assert_eq!(r.total_hidden, 6.0);
    assert_eq!(r.end_to_end, 44.0 - 6.0);
}

fn exposed_backward(n: usize, policy: BackwardPolicy, d: &OpDurations) -> (f64, f64) {
    let g = build_backward_schedule(n, ScheduleMode::FarSkip, policy, d).unwrap();
    let tl = simulate(&g, 0.0).unwrap();
    (overlap_report(&tl, None).total_exposed, tl.end_to_end)
}

#[test]
fn reprioritization_reduces_exposed_backward_comm() {
    let d = golden();
    let (naive, naive_t) = exposed_backward(2, BackwardPolicy::Naive, &d);
    let (repr, repr_t) = exposed_backward(2, BackwardPolicy::Reprioritized, &d);
    assert!(naive > repr, "naive {naive} vs reprioritized {repr}");
    assert!(naive_t > repr_t);
}

#[test]
fn zero_comm_backward_policies_agree() {
    let d = golden().with_zero_comm();
    for n in 1..5 {
        assert_eq!(exposed_backward(n, BackwardPolicy::Naive, &d).1, exposed_backward(n, BackwardPolicy::Reprioritized, &d).1);
    }
}

#[test]
fn single_layer_reprioritization_is_a_no_op() {
    let d = golden();
    let a = build_backward_schedule(1, ScheduleMode::FarSkip, BackwardPolicy::Naive, &d).unwrap();
    let b = build_backward_schedule(1, ScheduleMode::FarSkip, BackwardPolicy::Reprioritized, &d).unwrap();
    assert_eq!(a, b);
}

#[test]
fn first_backward_collective_is_exposed() {
    let d = golden();
    for policy in [BackwardPolicy::Naive, BackwardPolicy::Reprioritized] {
        let g = build_backward_schedule(3, ScheduleMode::FarSkip, policy, &d).unwrap();
        let r = overlap_report(&simulate(&g, 0.0).unwrap(), None);
        assert_eq!(r.collectives[0].name, "L3.combine.bwd");
        assert_eq!(r.collectives[0].hidden, 0.0);
    }
}

#[test]
fn key_pass_matches_reprioritized_builder() {
    let d = golden();
    let mut g = build_backward_schedule(3, ScheduleMode::FarSkip, BackwardPolicy::Naive, &d).unwrap();
    reprioritize(&mut g, 3);
    let b = build_backward_schedule(3, ScheduleMode::FarSkip, BackwardPolicy::Reprioritized, &d).unwrap();
    assert_eq!(g, b);
}

fn prefill(ar: f64) -> OpDurations {
    OpDurations { dispatch: 0.0, combine: 0.0, allreduce_attn: ar, allreduce_moe: ar, ..golden() }
}

#[test]
fn regular_prefill_never_overlaps() {
    for ar in [0.5, 3.0, 50.0] {
        let g = build_inference_prefill_schedule(3, ScheduleMode::Regular, &prefill(ar)).unwrap();
        assert_eq!(overlap_report(&simulate(&g, 0.0).unwrap(), None).total_hidden, 0.0);
    }
}

#[test]
fn farskip_prefill_hides_interior_all_reduces() {
    // 3 <= gate + routed + shared and 3 <= qkv + core
    let g = build_inference_prefill_schedule(4, ScheduleMode::FarSkip, &prefill(3.0)).unwrap();
    let r = overlap_report(&simulate(&g, 0.0).unwrap(), None);
    for c in &r.collectives {
        let last_moe = c.layer == 4 && c.name.ends_with("allreduce_moe");
        assert_eq!(c.fraction(), if last_moe { 0.0 } else { 1.0 }, "{}", c.name);
    }
    assert!(build_inference_prefill_schedule(2, ScheduleMode::RegularPlus, &prefill(1.0)).is_err());
}

#[test]
fn bound_examples() {
    let d = golden().with_zero_comm();
    let b = overlap_bound(&d);
    assert!(b.feasible);
    assert_eq!(b.slack, d.layer_compute() - d.routed_experts - d.gate);
    let tight = OpDurations { dispatch: 5.0, combine: 5.0, ..golden() };
    let b = overlap_bound(&tight);
    assert!(b.feasible);
    assert_eq!(b.slack, 0.0);
}

#[test]
fn training_schedule_streams_are_exclusive() {
    let g = build_training_schedule(3, ScheduleMode::FarSkip, BackwardPolicy::Reprioritized, &golden()).unwrap();
    let tl = simulate(&g, 0.3).unwrap();
    tl.check_exclusive().unwrap();
    assert_eq!(tl.stream_events(Stream::Comm).len(), 12);
    assert!(build_training_schedule(0, ScheduleMode::FarSkip, BackwardPolicy::Naive, &golden()).is_err());
}
