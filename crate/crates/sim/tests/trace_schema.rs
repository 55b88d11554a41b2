use farskip_sim::build::*;
use farskip_sim::{simulate, trace, OpDurations};

fn schema() -> jsonschema::JSONSchema {
    let text = include_str!("../schema/trace_event_format.schema.json");
    jsonschema::JSONSchema::compile(&serde_json::from_str(text).unwrap()).unwrap()
}

fn durations() -> OpDurations {
    OpDurations {
        gate: 1.0,
        dispatch: 3.0,
        attn_qkv: 2.0,
        attn_core: 4.0,
        routed_experts: 5.0,
        combine: 3.0,
        shared_expert: 4.0,
        allreduce_attn: 2.0,
        allreduce_moe: 2.0,
        norm: 0.5,
        backward_factor: 2.0,
    }
}

#[test]
fn emitted_traces_validate() {
    let schema = schema();
    let d = durations();
    let graphs = [
        build_forward_schedule(3, ScheduleMode::FarSkip, &d).unwrap(),
        build_training_schedule(3, ScheduleMode::Regular, BackwardPolicy::Naive, &d).unwrap(),
        build_inference_prefill_schedule(3, ScheduleMode::FarSkip, &d).unwrap(),
    ];
    for g in &graphs {
        let text = trace::write_trace(&simulate(g, 0.2).unwrap());
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(schema.is_valid(&value));
        trace::parse_trace(&text).unwrap();
    }
}

#[test]
fn overlapping_or_malformed_traces_are_rejected() {
    let overlap = r#"[{"name":"a","ph":"X","ts":0,"dur":2,"pid":0,"tid":0},{"name":"b","ph":"X","ts":1,"dur":2,"pid":0,"tid":0}]"#;
    assert!(trace::parse_trace(overlap).is_err());
    let other_stream = r#"[{"name":"a","ph":"X","ts":0,"dur":2,"pid":0,"tid":0},{"name":"b","ph":"X","ts":1,"dur":2,"pid":0,"tid":1}]"#;
    assert!(trace::parse_trace(other_stream).is_ok());
    let schema = schema();
    let missing_dur = serde_json::json!([{"name": "a", "ph": "X", "ts": 0, "pid": 0, "tid": 0}]);
    assert!(!schema.is_valid(&missing_dur));
    assert!(trace::parse_trace(&missing_dur.to_string()).is_err());
}
