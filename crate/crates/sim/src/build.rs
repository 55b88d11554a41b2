//! Forward, backward and inference-prefill schedule builders.
//!
//! Builders emit data/synchronization edges plus issue keys; the keys give
//! the host-side launch order (autograd sequence numbers in backward).

use serde::{Deserialize, Serialize};

use crate::dag::{OpKind, Pass, ScheduleDAG};
use crate::error::{Result, SimError};
use crate::profile::OpDurations;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Every collective blocks the op after it.
    Regular,
    /// Regular, but the shared expert runs under the combine.
    RegularPlus,
    /// Rewired connectivity: collectives overlap the neighbouring sub-block.
    FarSkip,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardPolicy {
    /// Reverse forward creation order.
    #[default]
    Naive,
    /// Sub-block compute drained before the producers of collective inputs.
    Reprioritized,
}

use OpKind::*;

const FWD_REGULAR: [OpKind; 7] = [AttnQkv, AttnCore, Gate, DispatchA2a, RoutedExperts, CombineA2a, SharedExpert];
const FWD_FARSKIP: [OpKind; 7] = [AttnQkv, Gate, DispatchA2a, AttnCore, RoutedExperts, CombineA2a, SharedExpert];
// The last layer finishes its compute first: nothing after it can hide the
// final combine.
const FWD_FARSKIP_LAST: [OpKind; 7] = [AttnQkv, Gate, DispatchA2a, AttnCore, RoutedExperts, SharedExpert, CombineA2a];
const BWD_REPRIORITIZED: [OpKind; 7] = [CombineA2a, SharedExpert, AttnCore, RoutedExperts, DispatchA2a, AttnQkv, Gate];
const BWD_REGULAR_PLUS: [OpKind; 7] = [CombineA2a, SharedExpert, RoutedExperts, DispatchA2a, Gate, AttnCore, AttnQkv];

fn duration(d: &OpDurations, kind: OpKind) -> f64 {
    match kind {
        Gate => d.gate,
        DispatchA2a => d.dispatch,
        AttnQkv => d.attn_qkv,
        AttnCore => d.attn_core,
        RoutedExperts => d.routed_experts,
        CombineA2a => d.combine,
        SharedExpert => d.shared_expert,
        AllReduceAttn => d.allreduce_attn,
        AllReduceMoe => d.allreduce_moe,
        Norm => d.norm,
    }
}

fn backward_duration(d: &OpDurations, kind: OpKind) -> f64 {
    if kind.is_comm() {
        duration(d, kind)
    } else {
        duration(d, kind) * d.backward_factor
    }
}

fn check(n_layers: usize, d: &OpDurations) -> Result<()> {
    if n_layers == 0 {
        return Err(SimError::Config("schedule needs at least one layer".into()));
    }
    d.validate()
}

fn forward_order(mode: ScheduleMode, layer: usize, n_layers: usize) -> &'static [OpKind; 7] {
    match mode {
        ScheduleMode::Regular | ScheduleMode::RegularPlus => &FWD_REGULAR,
        ScheduleMode::FarSkip if layer == n_layers => &FWD_FARSKIP_LAST,
        ScheduleMode::FarSkip => &FWD_FARSKIP,
    }
}

/// Issue key of each forward op: its position in the forward launch order.
fn forward_key(mode: ScheduleMode, layer: usize, n_layers: usize, kind: OpKind) -> i64 {
    let pos = forward_order(mode, layer, n_layers).iter().position(|&k| k == kind).expect("moe layer op");
    ((layer - 1) * 8 + pos) as i64
}

fn add_forward(g: &mut ScheduleDAG, n_layers: usize, mode: ScheduleMode, d: &OpDurations) -> usize {
    let mut prev: Option<[usize; 7]> = None;
    for layer in 1..=n_layers {
        let mut id = [0usize; 7];
        for kind in forward_order(mode, layer, n_layers) {
            let i = g.add(*kind, layer, Pass::Fwd, duration(d, *kind), forward_key(mode, layer, n_layers, *kind));
            id[FWD_REGULAR.iter().position(|k| k == kind).expect("known op")] = i;
        }
        let [qkv, core, gate, dispatch, routed, combine, shared] = id;
        g.dep(qkv, core);
        g.dep(gate, dispatch);
        g.dep(dispatch, routed);
        g.dep(routed, combine);
        g.dep(gate, shared);
        match mode {
            ScheduleMode::Regular | ScheduleMode::RegularPlus => {
                g.dep(core, gate);
                if let Some(p) = prev {
                    g.dep(p[5], qkv);
                    g.dep(p[6], qkv);
                }
                if mode == ScheduleMode::Regular {
                    // host blocks on the combine before launching more work
                    g.dep(combine, shared);
                }
            }
            ScheduleMode::FarSkip => {
                if let Some(p) = prev {
                    // attention reads o[k-2] + attn[k-1] + shared[k-1]
                    g.dep(p[1], qkv);
                    g.dep(p[6], qkv);
                    // the MoE reads o[k-1], synchronizing the previous combine
                    g.dep(p[1], gate);
                    g.dep(p[5], gate);
                    g.dep(p[6], gate);
                }
            }
        }
        prev = Some(id);
    }
    let last = prev.expect("n_layers >= 1");
    let norm = g.add(Norm, 0, Pass::Fwd, d.norm, (n_layers * 8) as i64);
    for i in [last[1], last[5], last[6]] {
        g.dep(i, norm);
    }
    norm
}

pub fn build_forward_schedule(n_layers: usize, mode: ScheduleMode, d: &OpDurations) -> Result<ScheduleDAG> {
    check(n_layers, d)?;
    let mut g = ScheduleDAG::default();
    add_forward(&mut g, n_layers, mode, d);
    Ok(g)
}

fn backward_key(mode: ScheduleMode, policy: BackwardPolicy, layer: usize, n_layers: usize, kind: OpKind) -> i64 {
    let base = (n_layers * 8 + 1) as i64;
    // position within the layer's group; layers are processed top-down
    let group = ((n_layers - layer) * 8) as i64;
    let table = match (mode, policy) {
        (ScheduleMode::FarSkip, BackwardPolicy::Reprioritized) if layer < n_layers => Some(&BWD_REPRIORITIZED),
        (ScheduleMode::RegularPlus, _) => Some(&BWD_REGULAR_PLUS),
        _ => None,
    };
    match table {
        Some(t) => base + group + t.iter().position(|&k| k == kind).expect("moe layer op") as i64,
        // reverse creation order
        None => base + (n_layers * 8) as i64 - forward_key(mode, layer, n_layers, kind),
    }
}

fn add_backward(g: &mut ScheduleDAG, n_layers: usize, mode: ScheduleMode, policy: BackwardPolicy, d: &OpDurations) -> usize {
    let key0 = (n_layers * 8) as i64;
    let norm = g.add(Norm, 0, Pass::Bwd, d.norm * d.backward_factor, key0);
    let mut above: Option<[usize; 7]> = None;
    for layer in (1..=n_layers).rev() {
        let mut id = [0usize; 7];
        for (j, &kind) in FWD_REGULAR.iter().enumerate() {
            id[j] = g.add(kind, layer, Pass::Bwd, backward_duration(d, kind), backward_key(mode, policy, layer, n_layers, kind));
        }
        let [qkv, core, gate, dispatch, routed, combine, shared] = id;
        g.dep(combine, routed);
        g.dep(routed, dispatch);
        g.dep(dispatch, gate);
        g.dep(shared, gate);
        g.dep(core, qkv);
        match mode {
            ScheduleMode::Regular | ScheduleMode::RegularPlus => {
                let upstream = above.map_or(norm, |a| a[0]);
                g.dep(upstream, combine);
                g.dep(upstream, shared);
                g.dep(gate, core);
            }
            ScheduleMode::FarSkip => {
                match above {
                    None => {
                        g.dep(norm, combine);
                        g.dep(norm, shared);
                        g.dep(norm, core);
                        // the first collective of backward has nothing to hide under
                        g.dep(combine, shared);
                    }
                    Some(a) => {
                        g.dep(a[2], combine);
                        for i in [a[0], a[2]] {
                            g.dep(i, shared);
                            g.dep(i, core);
                        }
                    }
                }
            }
        }
        above = Some(id);
    }
    norm
}

pub fn build_backward_schedule(n_layers: usize, mode: ScheduleMode, policy: BackwardPolicy, d: &OpDurations) -> Result<ScheduleDAG> {
    check(n_layers, d)?;
    let mut g = ScheduleDAG::default();
    add_backward(&mut g, n_layers, mode, policy, d);
    Ok(g)
}

/// Forward followed by backward; backward starts once the loss is known.
pub fn build_training_schedule(n_layers: usize, mode: ScheduleMode, policy: BackwardPolicy, d: &OpDurations) -> Result<ScheduleDAG> {
    check(n_layers, d)?;
    let mut g = ScheduleDAG::default();
    let fwd_norm = add_forward(&mut g, n_layers, mode, d);
    let offset = g.nodes.len();
    let bwd_norm = add_backward(&mut g, n_layers, mode, policy, d);
    debug_assert_eq!(bwd_norm, offset);
    g.dep(fwd_norm, bwd_norm);
    Ok(g)
}

/// Reassigns backward issue keys to the reprioritized order; the key pass
/// that stands in for rewriting autograd sequence numbers.
pub fn reprioritize(g: &mut ScheduleDAG, n_layers: usize) {
    for n in g.nodes.iter_mut().filter(|n| n.pass == Pass::Bwd && n.layer > 0) {
        n.key = backward_key(ScheduleMode::FarSkip, BackwardPolicy::Reprioritized, n.layer, n_layers, n.kind);
    }
}

const INF_ORDER: [OpKind; 7] = [AttnQkv, AttnCore, AllReduceAttn, Gate, RoutedExperts, SharedExpert, AllReduceMoe];

/// Prefill with replicated activations: an all-reduce closes each
/// sub-block. FarSkip defers each wait to the next sub-block of the same type.
pub fn build_inference_prefill_schedule(n_layers: usize, mode: ScheduleMode, d: &OpDurations) -> Result<ScheduleDAG> {
    check(n_layers, d)?;
    if mode == ScheduleMode::RegularPlus {
        return Err(SimError::Config("prefill schedules are regular or farskip".into()));
    }
    let mut g = ScheduleDAG::default();
    let mut prev: Option<[usize; 7]> = None;
    for layer in 1..=n_layers {
        let mut id = [0usize; 7];
        for (j, &kind) in INF_ORDER.iter().enumerate() {
            id[j] = g.add(kind, layer, Pass::Fwd, duration(d, kind), ((layer - 1) * 8 + j) as i64);
        }
        let [qkv, core, ar_attn, gate, routed, shared, ar_moe] = id;
        g.dep(qkv, core);
        g.dep(core, ar_attn);
        g.dep(gate, routed);
        g.dep(gate, shared);
        g.dep(routed, ar_moe);
        g.dep(shared, ar_moe);
        if let Some(p) = prev {
            g.dep(p[2], qkv);
            g.dep(p[6], gate);
            g.dep(p[2], gate);
        }
        match mode {
            ScheduleMode::FarSkip => {}
            _ => {
                g.dep(ar_attn, gate);
                if let Some(p) = prev {
                    g.dep(p[6], qkv);
                }
            }
        }
        prev = Some(id);
    }
    let last = prev.expect("n_layers >= 1");
    let norm = g.add(Norm, 0, Pass::Fwd, d.norm, (n_layers * 8) as i64);
    g.dep(last[2], norm);
    g.dep(last[6], norm);
    Ok(g)
}
