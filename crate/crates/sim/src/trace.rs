//! Trace Event Format output: a JSON array of complete (`"X"`) events, one
//! per op, plus thread-name metadata (`"M"`) so viewers label the streams.
//! Timestamps and durations are microseconds; `pid` is the rank and `tid`
//! the stream (0 compute, 1 communication).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dag::Stream;
use crate::error::{Result, SimError};
use crate::simulate::Timeline;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cat: Option<String>,
    pub ph: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dur: Option<f64>,
    pub pid: u32,
    pub tid: u32,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub args: Map<String, Value>,
}

pub fn trace_events(tl: &Timeline) -> Vec<TraceEvent> {
    let mut out = Vec::with_capacity(tl.events.len() + 2);
    for s in [Stream::Compute, Stream::Comm] {
        let mut args = Map::new();
        args.insert("name".into(), Value::from(if s == Stream::Compute { "compute" } else { "comm" }));
        out.push(TraceEvent { name: "thread_name".into(), cat: None, ph: "M".into(), ts: None, dur: None, pid: 0, tid: s.tid(), args });
    }
    let mut events: Vec<_> = tl.events.iter().collect();
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.node.cmp(&b.node)));
    for e in events {
        let mut args = Map::new();
        args.insert("node".into(), Value::from(e.node));
        args.insert("layer".into(), Value::from(e.layer));
        args.insert("pass".into(), serde_json::to_value(e.pass).expect("enum serializes"));
        out.push(TraceEvent {
            name: e.name.clone(),
            cat: Some(if e.stream == Stream::Comm { "comm".into() } else { "compute".into() }),
            ph: "X".into(),
            ts: Some(e.start),
            dur: Some(e.duration()),
            pid: e.rank,
            tid: e.stream.tid(),
            args,
        });
    }
    out
}

pub fn write_trace(tl: &Timeline) -> String {
    serde_json::to_string_pretty(&trace_events(tl)).expect("trace serializes")
}

/// Relative slack for `ts + dur` landing an ulp past the next start.
const ROUNDING: f64 = 1e-12;

/// Parses a trace and checks it: known phases, finite non-negative times on
/// complete events, and no two complete events overlapping on one
/// `(pid, tid)`.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    let events: Vec<TraceEvent> = serde_json::from_str(text).map_err(|e| SimError::Format(e.to_string()))?;
    let mut lanes: BTreeMap<(u32, u32), Vec<(f64, f64)>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        match e.ph.as_str() {
            "X" => {
                let (Some(ts), Some(dur)) = (e.ts, e.dur) else {
                    return Err(SimError::Format(format!("event {i} lacks ts or dur")));
                };
                if !(ts.is_finite() && dur.is_finite() && ts >= 0.0 && dur >= 0.0) {
                    return Err(SimError::Format(format!("event {i} has bad times")));
                }
                lanes.entry((e.pid, e.tid)).or_default().push((ts, ts + dur));
            }
            "M" => {}
            other => return Err(SimError::Format(format!("event {i} has unsupported phase {other:?}"))),
        }
    }
    for ((pid, tid), mut iv) in lanes {
        iv.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        if iv.windows(2).any(|w| w[1].0 < w[0].1 - ROUNDING * w[0].1.max(1.0)) {
            return Err(SimError::Format(format!("overlapping events on pid {pid} tid {tid}")));
        }
    }
    Ok(events)
}
