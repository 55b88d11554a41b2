//! Discrete-event simulation of compute/communication overlap for MoE
//! training and inference schedules.
//!
//! A schedule is a DAG of per-layer ops with issue keys; [`simulate`] runs
//! it on one compute and one communication stream and [`overlap_report`]
//! splits every collective into hidden and exposed time.

pub mod build;
pub mod dag;
pub mod error;
pub mod profile;
pub mod report;
pub mod scaling;
pub mod scenario;
pub mod simulate;
pub mod trace;

pub use build::{
    build_backward_schedule, build_forward_schedule, build_inference_prefill_schedule, build_training_schedule,
    reprioritize, BackwardPolicy, ScheduleMode,
};
pub use dag::{OpKind, OpSpec, Pass, ScheduleDAG, Stream};
pub use error::{Result, SimError};
pub use profile::{HardwareProfile, OpDurations, Workload};
pub use report::{overlap_bound, overlap_report, OverlapBound, OverlapReport};
pub use scenario::{Scenario, ScenarioPass, ScenarioRun};
pub use simulate::{simulate, Event, Timeline};
