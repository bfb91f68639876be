//! Deterministic discrete-event simulation of a spot fleet draining a task
//! queue: contended index download, per-stage task durations, early stop,
//! interruptions with replacement instances, and cost/waste accounting.
//!
//! Time is in seconds from the start of the run. One seeded ChaCha stream
//! drives start staggering, Poisson interruptions and failure injection, so a
//! scenario and seed always produce the same trace.
//!
//! Waste is the time an interrupted instance had spent on its current task
//! (or on its index download if it had not finished), plus the index download
//! of every replacement instance.

mod cost;
mod engine;
mod scenario;
mod trace;
mod workload;

use serde::{Deserialize, Serialize};

pub use cost::{cost_of, index_distribution_time, index_transfer_cost, CostBreakdown, GB_PER_GIB};
pub use engine::simulate;
pub use scenario::{
    InstanceSpec, InterruptionModel, Pricing, ScenarioError, ScheduledInterruption, SimScenario,
    StageTimeModel, WorkloadSource,
};
pub use trace::{
    emit_timeline, read_timeline_csv, write_timeline_csv, EventKind, FleetTrace, TimelineRow, TraceEvent,
};
pub use workload::{SyntheticWorkload, TissueProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub node_hours: f64,
    pub files_completed: u64,
    pub files_failed: u64,
    pub early_stopped: u64,
    pub interruptions: u64,
    pub wasted_seconds: f64,
    pub wasted_fraction: f64,
    pub cost: CostBreakdown,
    /// Mean final rate over tasks that ran to completion.
    pub avg_mapping_rate: Option<f64>,
    pub makespan_seconds: f64,
    pub instances_launched: u64,
    /// When the last initial instance finished loading the index.
    pub initial_index_loaded_seconds: Option<f64>,
    pub align_seconds: f64,
    pub align_seconds_without_early_stop: f64,
    pub duplicate_completions: u64,
    pub tasks_in_queue: u64,
}

impl SimSummary {
    /// Share of align time saved by early stopping.
    pub fn early_stop_saving(&self) -> f64 {
        if self.align_seconds_without_early_stop > 0.0 {
            1.0 - self.align_seconds / self.align_seconds_without_early_stop
        } else {
            0.0
        }
    }
}
