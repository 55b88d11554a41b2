//! Operator dependency graphs and their issue-order materialization.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Gate,
    DispatchA2a,
    AttnQkv,
    AttnCore,
    RoutedExperts,
    CombineA2a,
    SharedExpert,
    AllReduceAttn,
    AllReduceMoe,
    Norm,
}

impl OpKind {
    pub fn stream(self) -> Stream {
        match self {
            OpKind::DispatchA2a | OpKind::CombineA2a | OpKind::AllReduceAttn | OpKind::AllReduceMoe => Stream::Comm,
            _ => Stream::Compute,
        }
    }

    pub fn is_comm(self) -> bool {
        self.stream() == Stream::Comm
    }

    pub fn label(self) -> &'static str {
        match self {
            OpKind::Gate => "gate",
            OpKind::DispatchA2a => "dispatch",
            OpKind::AttnQkv => "attn_qkv",
            OpKind::AttnCore => "attn_core",
            OpKind::RoutedExperts => "routed",
            OpKind::CombineA2a => "combine",
            OpKind::SharedExpert => "shared",
            OpKind::AllReduceAttn => "allreduce_attn",
            OpKind::AllReduceMoe => "allreduce_moe",
            OpKind::Norm => "norm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    Comm,
}

impl Stream {
    pub fn tid(self) -> u32 {
        match self {
            Stream::Compute => 0,
            Stream::Comm => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Fwd,
    Bwd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpSpec {
    pub kind: OpKind,
    /// 1-based layer; 0 for model-level ops such as the final norm.
    pub layer: usize,
    pub pass: Pass,
    pub stream: Stream,
    /// Microseconds.
    pub duration: f64,
    /// Issue priority: among issuable nodes the lowest key goes first.
    pub key: i64,
}

impl OpSpec {
    pub fn name(&self) -> String {
        let base = if self.layer == 0 { self.kind.label().to_string() } else { format!("L{}.{}", self.layer, self.kind.label()) };
        match self.pass {
            Pass::Fwd => base,
            Pass::Bwd => format!("{base}.bwd"),
        }
    }
}

/// Nodes plus data/synchronization edges `(from, to)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDAG {
    pub nodes: Vec<OpSpec>,
    pub edges: Vec<(usize, usize)>,
}

/// The DAG with issue order fixed: per-stream FIFO chains and launch edges
/// added to the logical edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Materialized {
    pub issue_order: Vec<usize>,
    pub preds: Vec<Vec<usize>>,
}

impl ScheduleDAG {
    pub fn add(&mut self, kind: OpKind, layer: usize, pass: Pass, duration: f64, key: i64) -> usize {
        self.nodes.push(OpSpec { kind, layer, pass, stream: kind.stream(), duration, key });
        self.nodes.len() - 1
    }

    pub fn dep(&mut self, from: usize, to: usize) {
        if !self.edges.contains(&(from, to)) {
            self.edges.push((from, to));
        }
    }

    pub fn find(&self, kind: OpKind, layer: usize, pass: Pass) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == kind && n.layer == layer && n.pass == pass)
    }

    pub fn successors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == node).map(|e| e.1)
    }

    pub fn predecessors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == node).map(|e| e.0)
    }

    pub fn validate(&self) -> Result<()> {
        for &(a, b) in &self.edges {
            if a >= self.nodes.len() || b >= self.nodes.len() || a == b {
                return Err(SimError::Structure(format!("bad edge ({a}, {b})")));
            }
        }
        for n in &self.nodes {
            if n.stream != n.kind.stream() {
                return Err(SimError::Structure(format!("{} on the wrong stream", n.name())));
            }
            if !(n.duration.is_finite() && n.duration >= 0.0) {
                return Err(SimError::Structure(format!("{} has duration {}", n.name(), n.duration)));
            }
        }
        Ok(())
    }

    /// Collectives that no compute node waits on.
    pub fn terminal_collectives(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind.is_comm())
            .filter(|&i| !self.successors(i).any(|s| !self.nodes[s].kind.is_comm()))
            .collect()
    }

    /// Issues nodes one at a time, always the lowest `(key, id)` among nodes
    /// whose predecessors were all issued; errors on a cycle.
    pub fn issue_order(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let n = self.nodes.len();
        let mut missing = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            missing[b] += 1;
            succ[a].push(b);
        }
        let mut ready: std::collections::BTreeSet<(i64, usize)> =
            (0..n).filter(|&i| missing[i] == 0).map(|i| (self.nodes[i].key, i)).collect();
        let mut order = Vec::with_capacity(n);
        while let Some((k, i)) = ready.iter().next().copied() {
            ready.remove(&(k, i));
            order.push(i);
            for &s in &succ[i] {
                missing[s] -= 1;
                if missing[s] == 0 {
                    ready.insert((self.nodes[s].key, s));
                }
            }
        }
        if order.len() != n {
            return Err(SimError::Structure("dependency cycle".into()));
        }
        Ok(order)
    }

    /// Adds the execution constraints implied by the issue order: each stream
    /// runs its nodes first-in first-out, and a collective is launched only
    /// once the compute op issued just before it has finished.
    pub fn materialize(&self) -> Result<Materialized> {
        let order = self.issue_order()?;
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            preds[b].push(a);
        }
        let mut last_on = [None::<usize>; 2];
        for &i in &order {
            let s = self.nodes[i].stream;
            if let Some(p) = last_on[s.tid() as usize] {
                preds[i].push(p);
            }
            if s == Stream::Comm {
                if let Some(c) = last_on[Stream::Compute.tid() as usize] {
                    preds[i].push(c);
                }
            }
            last_on[s.tid() as usize] = Some(i);
        }
        for p in &mut preds {
            p.sort_unstable();
            p.dedup();
        }
        Ok(Materialized { issue_order: order, preds })
    }

    pub fn total_duration(&self) -> f64 {
        self.nodes.iter().map(|n| n.duration).sum()
    }
}
