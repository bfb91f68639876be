use std::collections::BTreeMap;
use std::sync::Mutex;

use alignfleet_core::executor::{
    ExecError, InjectedFailure, InjectedInterruption, StageContext, StageOutcome,
};
use alignfleet_core::queue::QueueId;
use alignfleet_core::worker::{Phase, GIB};
use alignfleet_core::{
    Clock, EarlyStopPolicy, Executor, KillSwitch, Ledger, ManualClock, QueueSet, RecordStatus,
    ResourceEnvelope, Stage, SyntheticConfig, SyntheticExecutor, TaskSpec, Worker, WorkerConfig,
};
use approx::assert_relative_eq;

const GB: u64 = 1_000_000_000;

fn task(id: &str, rate: f64) -> TaskSpec {
    TaskSpec::new(id, GB).with_reads(10_000_000).with_mapping_rate(rate)
}

fn quiet_config() -> SyntheticConfig {
    SyntheticConfig {
        noise_std: 0.0,
        progress_interval_seconds: 5.0,
        ..SyntheticConfig::default()
    }
}

fn policy() -> EarlyStopPolicy {
    EarlyStopPolicy {
        poll_interval_seconds: 5.0,
        ..EarlyStopPolicy::default()
    }
}

struct Fixture {
    queues: QueueSet,
    ledger: Ledger,
    clock: ManualClock,
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(tasks: &[TaskSpec]) -> Self {
        Self::with_queues(QueueSet::in_memory(None), tasks)
    }

    fn with_queues(queues: QueueSet, tasks: &[TaskSpec]) -> Self {
        for t in tasks {
            queues.enqueue(t.clone(), 0.0).unwrap();
        }
        Self {
            queues,
            ledger: Ledger::in_memory(),
            clock: ManualClock::new(0.0),
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn worker<'a>(&'a self, exec: &'a dyn Executor, envelope: ResourceEnvelope) -> Worker<'a> {
        Worker::new(
            WorkerConfig::new("w0", self.dir.path()),
            &self.queues,
            &self.ledger,
            exec,
            policy(),
            envelope,
            &self.clock,
        )
    }
}

#[test]
fn empty_queue_terminates_cleanly() {
    let fx = Fixture::new(&[]);
    let exec = SyntheticExecutor::new(quiet_config());
    let w = fx.worker(&exec, ResourceEnvelope::default());
    let report = w.run().unwrap();
    assert_eq!(report.processed(), 0);
    assert!(!report.interrupted);
    assert!(fx.ledger.records().is_empty());
}

#[test]
fn healthy_task_records_all_stage_timings() {
    let fx = Fixture::new(&[task("A", 0.9)]);
    let exec = SyntheticExecutor::new(quiet_config());
    let report = fx.worker(&exec, ResourceEnvelope::default()).run().unwrap();
    assert_eq!(report.tasks_completed, 1);
    assert_eq!(fx.ledger.status("A"), Some(RecordStatus::Completed));
    let rec = fx.ledger.records().into_iter().last().unwrap();
    assert_eq!(rec.stage_timings.keys().copied().collect::<Vec<_>>(), Stage::ALL.to_vec());
    assert!(!rec.terminated_early);
    assert_relative_eq!(rec.final_mapping_rate.unwrap(), 0.9, epsilon = 1e-9);
    assert!(fx.queues.is_empty());
}

#[test]
fn low_rate_task_stops_early_near_ten_percent() {
    let fx = Fixture::new(&[task("LOW", 0.1)]);
    let exec = SyntheticExecutor::new(quiet_config());
    let full_align = exec.align_seconds(&task("LOW", 0.1));
    fx.worker(&exec, ResourceEnvelope::default()).run().unwrap();
    let rec = fx.ledger.records().into_iter().last().unwrap();
    assert_eq!(rec.status, RecordStatus::Completed);
    assert!(rec.terminated_early);
    let align = rec.stage_timings[&Stage::Align];
    // stop lands on the first sample past 10% of reads, then the next poll tick
    assert!(align >= 0.1 * full_align, "{align} vs {full_align}");
    assert!(align <= 0.1 * full_align + 2.0 * 5.0, "{align} vs {full_align}");
    assert!(!rec.stage_timings.contains_key(&Stage::SortNormalize));
}

#[test]
fn interruption_during_align_requeues_and_counts_waste() {
    let cfg = SyntheticConfig {
        interruptions: vec![InjectedInterruption {
            sra_id: "A".into(),
            stage: Stage::Align,
            fraction: 0.6,
        }],
        ..quiet_config()
    };
    let fx = Fixture::new(&[task("A", 0.9)]);
    let exec = SyntheticExecutor::new(cfg);
    let t = task("A", 0.9);
    let expected_waste = exec.stage_seconds(Stage::Prefetch, &t)
        + exec.stage_seconds(Stage::Convert, &t)
        + 0.6 * exec.align_seconds(&t);

    let report = fx.worker(&exec, ResourceEnvelope::default()).run().unwrap();
    assert!(report.interrupted);
    assert_eq!(report.tasks_requeued, 1);
    assert_eq!(report.tasks_completed, 0);
    assert_relative_eq!(report.wasted_seconds, expected_waste, epsilon = 1e-9);
    assert_ne!(fx.ledger.status("A"), Some(RecordStatus::Completed));
    assert!(!fx.dir.path().join("w0").join("A").exists());

    // a replacement picks it up again and finishes
    let report = fx.worker(&exec, ResourceEnvelope::default()).run().unwrap();
    assert_eq!(report.tasks_completed, 1);
    assert_eq!(fx.ledger.status("A"), Some(RecordStatus::Completed));
    let starts = fx
        .ledger
        .records()
        .iter()
        .filter(|r| r.status == RecordStatus::InProgress)
        .map(|r| r.attempt)
        .collect::<Vec<_>>();
    assert_eq!(starts, vec![1, 2]);
}

#[test]
fn interruption_while_polling_loses_nothing() {
    let fx = Fixture::new(&[task("A", 0.9), task("B", 0.9)]);
    let exec = SyntheticExecutor::new(quiet_config());
    let w = fx.worker(&exec, ResourceEnvelope::default());
    w.interrupt_handle()
        .fire(alignfleet_core::executor::KillReason::Interruption);
    let report = w.run().unwrap();
    assert!(report.interrupted);
    assert_eq!(report.tasks_requeued, 0);
    assert_eq!(report.wasted_seconds, 0.0);
    assert_eq!(fx.queues.len(), 2);
    assert!(fx.ledger.records().is_empty());
}

/// Runs a long Align stage in small clock steps and checks the message
/// never becomes visible to another consumer.
struct SlowAlign<'q> {
    queues: &'q QueueSet,
    clock: &'q ManualClock,
    stolen: Mutex<bool>,
}

impl Executor for SlowAlign<'_> {
    fn load_index(&self, _kill: &KillSwitch, _clock: &dyn Clock) -> Result<f64, ExecError> {
        Ok(0.0)
    }

    fn run_stage(&self, stage: Stage, ctx: &mut StageContext<'_>) -> Result<StageOutcome, ExecError> {
        let total = if stage == Stage::Align { 1000.0 } else { 1.0 };
        let mut done = 0.0;
        while done < total {
            self.clock.advance(10.0);
            done += 10.0_f64.min(total);
            (ctx.heartbeat)();
            if self.queues.queue(QueueId::Small).visible_count(self.clock.now()) > 0 {
                *self.stolen.lock().unwrap() = true;
            }
        }
        Ok(StageOutcome {
            seconds: total,
            early_stop: None,
            final_mapping_rate: Some(0.9),
        })
    }

    fn estimate_seconds(&self, _task: &TaskSpec) -> Option<f64> {
        Some(50.0)
    }
}

#[test]
fn heartbeat_keeps_long_task_leased() {
    let fx = Fixture::new(&[task("A", 0.9)]);
    let exec = SlowAlign {
        queues: &fx.queues,
        clock: &fx.clock,
        stolen: Mutex::new(false),
    };
    let report = fx.worker(&exec, ResourceEnvelope::default()).run().unwrap();
    assert_eq!(report.tasks_completed, 1);
    assert!(fx.clock.now() > 1000.0);
    assert!(!*exec.stolen.lock().unwrap(), "lease lapsed during the stage");
}

#[test]
fn out_of_memory_is_terminal_after_retry_limit() {
    let mut failures = BTreeMap::new();
    failures.insert("OOM".to_string(), (Stage::SortNormalize, InjectedFailure::OutOfMemory));
    let cfg = SyntheticConfig {
        failures,
        ..quiet_config()
    };
    let fx = Fixture::new(&[task("OOM", 0.9), task("OK", 0.9)]);
    let exec = SyntheticExecutor::new(cfg);
    let report = fx.worker(&exec, ResourceEnvelope::default()).run().unwrap();
    assert_eq!(report.tasks_failed, 1);
    assert_eq!(report.tasks_retried, 2);
    assert_eq!(report.tasks_completed, 1);
    assert_eq!(fx.ledger.failure_count("OOM"), 3);
    assert_eq!(fx.ledger.status("OOM"), Some(RecordStatus::Failed));
    assert!(fx.queues.is_empty());
}

#[test]
fn oversized_task_reroutes_to_large_queue() {
    let envelope = ResourceEnvelope {
        disk_capacity_gib: 100.0,
        ..ResourceEnvelope::default()
    };
    let big_env = ResourceEnvelope {
        disk_capacity_gib: 550.0,
        ..ResourceEnvelope::default()
    };
    // 8 GiB SRA: 8 + 2 * 7.5 * 8 = 128 GiB of scratch
    let big = TaskSpec::new("BIG", 8 * GIB as u64).with_reads(1_000_000).with_mapping_rate(0.9);
    let fx = Fixture::with_queues(QueueSet::in_memory(Some(20 * GB)), &[big, task("A", 0.9)]);
    let exec = SyntheticExecutor::new(quiet_config());

    let mut small_cfg = WorkerConfig::new("small", fx.dir.path());
    small_cfg.serves = vec![QueueId::Small];
    let small = Worker::new(small_cfg, &fx.queues, &fx.ledger, &exec, policy(), envelope, &fx.clock);
    let report = small.run().unwrap();
    assert_eq!(report.tasks_rerouted, 1);
    assert_eq!(report.tasks_completed, 1);
    assert_eq!(fx.queues.queue(QueueId::Large).len(), 1);

    let mut large_cfg = WorkerConfig::new("large", fx.dir.path());
    large_cfg.serves = vec![QueueId::Large];
    let large = Worker::new(large_cfg, &fx.queues, &fx.ledger, &exec, policy(), big_env, &fx.clock);
    let report = large.run().unwrap();
    assert_eq!(report.tasks_completed, 1);
    assert_eq!(fx.ledger.status("BIG"), Some(RecordStatus::Completed));
}

#[test]
fn completed_tasks_are_skipped_on_redelivery() {
    let fx = Fixture::new(&[task("A", 0.9)]);
    let exec = SyntheticExecutor::new(quiet_config());
    fx.worker(&exec, ResourceEnvelope::default()).run().unwrap();
    fx.queues.enqueue(task("A", 0.9), 0.0).unwrap();
    let w = fx.worker(&exec, ResourceEnvelope::default());
    assert_eq!(w.state().phase, Phase::Provisioning);
    let report = w.run().unwrap();
    assert_eq!(report.tasks_skipped, 1);
    assert_eq!(report.processed(), 0);
    assert_eq!(fx.ledger.completed_count(), 1);
}
