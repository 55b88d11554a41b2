//! Hidden/exposed communication accounting and the overlap feasibility bound.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dag::{Pass, Stream};
use crate::profile::OpDurations;
use crate::simulate::Timeline;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectiveOverlap {
    pub node: usize,
    pub name: String,
    pub layer: usize,
    pub pass: Pass,
    pub start: f64,
    pub duration: f64,
    pub hidden: f64,
    pub exposed: f64,
}

impl CollectiveOverlap {
    /// Zero-length collectives count as fully hidden.
    pub fn fraction(&self) -> f64 {
        if self.duration > 0.0 {
            self.hidden / self.duration
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassOverlap {
    pub pass: Pass,
    pub comm: f64,
    pub hidden: f64,
    pub exposed: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub end_to_end: f64,
    pub collectives: Vec<CollectiveOverlap>,
    pub passes: Vec<PassOverlap>,
    pub total_comm: f64,
    pub total_hidden: f64,
    pub total_exposed: f64,
    /// Hidden share of all communication time.
    pub time_weighted: f64,
    /// Mean of the per-pass fractions.
    pub pass_averaged: f64,
    pub baseline_end_to_end: Option<f64>,
    pub speedup: Option<f64>,
}

fn ratio(hidden: f64, total: f64) -> f64 {
    if total > 0.0 {
        hidden / total
    } else {
        0.0
    }
}

/// Compute time inside `[start, end)`; compute intervals are disjoint.
fn covered(compute: &[(f64, f64)], start: f64, end: f64) -> f64 {
    compute.iter().map(|&(s, e)| (e.min(end) - s.max(start)).max(0.0)).sum()
}

pub fn overlap_report(timeline: &Timeline, baseline: Option<&Timeline>) -> OverlapReport {
    let compute: Vec<(f64, f64)> = timeline
        .events
        .iter()
        .filter(|e| e.stream == Stream::Compute && e.end > e.start)
        .map(|e| (e.start, e.end))
        .collect();
    let mut collectives: Vec<CollectiveOverlap> = timeline
        .stream_events(Stream::Comm)
        .into_iter()
        .map(|e| {
            let hidden = covered(&compute, e.start, e.end);
            CollectiveOverlap {
                node: e.node,
                name: e.name.clone(),
                layer: e.layer,
                pass: e.pass,
                start: e.start,
                duration: e.duration(),
                hidden,
                exposed: e.duration() - hidden,
            }
        })
        .collect();
    collectives.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.node.cmp(&b.node)));
    let mut passes = Vec::new();
    for pass in [Pass::Fwd, Pass::Bwd] {
        let of: Vec<&CollectiveOverlap> = collectives.iter().filter(|c| c.pass == pass).collect();
        if of.is_empty() {
            continue;
        }
        let comm: f64 = of.iter().map(|c| c.duration).sum();
        let hidden: f64 = of.iter().map(|c| c.hidden).sum();
        passes.push(PassOverlap { pass, comm, hidden, exposed: comm - hidden, fraction: ratio(hidden, comm) });
    }
    let total_comm: f64 = collectives.iter().map(|c| c.duration).sum();
    let total_hidden: f64 = collectives.iter().map(|c| c.hidden).sum();
    let pass_averaged =
        if passes.is_empty() { 0.0 } else { passes.iter().map(|p| p.fraction).sum::<f64>() / passes.len() as f64 };
    let baseline_end_to_end = baseline.map(|b| b.end_to_end);
    OverlapReport {
        end_to_end: timeline.end_to_end,
        collectives,
        passes,
        total_comm,
        total_hidden,
        total_exposed: total_comm - total_hidden,
        time_weighted: ratio(total_hidden, total_comm),
        pass_averaged,
        baseline_end_to_end,
        speedup: baseline_end_to_end.map(|b| b / timeline.end_to_end),
    }
}

impl OverlapReport {
    /// Plain-text table of per-collective overlap followed by totals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>12} {:>8}", "collective", "duration", "hidden", "exposed", "overlap");
        for c in &self.collectives {
            let _ = writeln!(
                s,
                "{:<24} {:>12.3} {:>12.3} {:>12.3} {:>7.1}%",
                c.name,
                c.duration,
                c.hidden,
                c.exposed,
                100.0 * c.fraction()
            );
        }
        for p in &self.passes {
            let _ = writeln!(s, "{:<24} {:>12.3} {:>12.3} {:>12.3} {:>7.1}%", format!("total {:?}", p.pass).to_lowercase(), p.comm, p.hidden, p.exposed, 100.0 * p.fraction);
        }
        let _ = writeln!(s, "overlap (time-weighted)  {:.1}%", 100.0 * self.time_weighted);
        let _ = writeln!(s, "overlap (pass-averaged)  {:.1}%", 100.0 * self.pass_averaged);
        let _ = writeln!(s, "end-to-end               {:.3}", self.end_to_end);
        if let (Some(b), Some(x)) = (self.baseline_end_to_end, self.speedup) {
            let _ = writeln!(s, "baseline end-to-end      {b:.3}");
            let _ = writeln!(s, "speedup                  {x:.4}x");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapBound {
    pub feasible: bool,
    /// Overlappable compute minus dispatch and combine time.
    pub slack: f64,
    pub layer_compute: f64,
}

/// Whether dispatch plus combine fit inside the compute a layer can run
/// without waiting on its own routed path.
pub fn overlap_bound(d: &OpDurations) -> OverlapBound {
    let layer_compute = d.layer_compute();
    let overlappable = layer_compute - (d.routed_experts + d.gate);
    let slack = overlappable - (d.dispatch + d.combine);
    OverlapBound { feasible: slack >= 0.0, slack, layer_compute }
}
