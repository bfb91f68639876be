//! The pipeline worker: load the index once, then lease tasks and run them
//! through prefetch, convert, align, sort/normalize and upload.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::executor::{ExecError, Executor, KillReason, KillSwitch, StageContext};
use crate::ledger::{Ledger, LedgerError, LedgerRecord, RecordStatus};
use crate::manifest::TaskSpec;
use crate::progress::EarlyStopPolicy;
use crate::queue::{QueueError, QueueId, QueueMessage, QueueSet, Receipt};

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefetch,
    Convert,
    Align,
    SortNormalize,
    Upload,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Prefetch,
        Stage::Convert,
        Stage::Align,
        Stage::SortNormalize,
        Stage::Upload,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prefetch => "prefetch",
            Stage::Convert => "convert",
            Stage::Align => "align",
            Stage::SortNormalize => "sort_normalize",
            Stage::Upload => "upload",
        }
    }

    pub fn phase(self) -> Phase {
        match self {
            Stage::Prefetch => Phase::Prefetch,
            Stage::Convert => Phase::Convert,
            Stage::Align => Phase::Align,
            Stage::SortNormalize => Phase::SortNormalize,
            Stage::Upload => Phase::Upload,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Provisioning,
    LoadingIndex,
    Polling,
    Prefetch,
    Convert,
    Align,
    SortNormalize,
    Upload,
    Draining,
    Terminated,
}

impl Phase {
    fn is_stage(self) -> bool {
        matches!(
            self,
            Phase::Prefetch | Phase::Convert | Phase::Align | Phase::SortNormalize | Phase::Upload
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkerError {
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: Phase, to: Phase },
    #[error("phase {0:?} requires a current task")]
    NoTask(Phase),
    #[error("align requires a loaded index")]
    IndexNotLoaded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub phase: Phase,
    pub current_task: Option<TaskSpec>,
    pub index_loaded: bool,
}

impl Default for WorkerState {
    fn default() -> Self {
        Self {
            phase: Phase::Provisioning,
            current_task: None,
            index_loaded: false,
        }
    }
}

impl WorkerState {
    /// Moves along the pipeline. Any live phase may go to `Draining`; stage
    /// phases may fall back to `Polling` when the task ends early.
    pub fn transition(&mut self, to: Phase) -> Result<(), WorkerError> {
        use Phase::*;
        let from = self.phase;
        let legal = match (from, to) {
            (Terminated, _) => false,
            (Draining, Terminated) => true,
            (Draining, _) => false,
            (_, Draining) => true,
            (Provisioning, LoadingIndex)
            | (LoadingIndex, Polling)
            | (Polling, Prefetch)
            | (Prefetch, Convert)
            | (Convert, Align)
            | (Align, SortNormalize)
            | (SortNormalize, Upload) => true,
            (f, Polling) if f.is_stage() => true,
            _ => false,
        };
        if !legal {
            return Err(WorkerError::IllegalTransition { from, to });
        }
        if to.is_stage() && self.current_task.is_none() {
            return Err(WorkerError::NoTask(to));
        }
        if to == Align && !self.index_loaded {
            return Err(WorkerError::IndexNotLoaded);
        }
        self.phase = to;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceEnvelope {
    pub disk_capacity_gib: f64,
    pub ram_gib: f64,
    pub index_size_gib: f64,
    pub fastq_expansion_default: f64,
    pub fastq_expansion_max: f64,
    pub sort_memory_default_gib: f64,
    pub sort_memory_max_gib: f64,
}

impl Default for ResourceEnvelope {
    fn default() -> Self {
        Self {
            disk_capacity_gib: 550.0,
            ram_gib: 64.0,
            index_size_gib: 29.5,
            fastq_expansion_default: 7.5,
            fastq_expansion_max: 17.0,
            sort_memory_default_gib: 2.0,
            sort_memory_max_gib: 20.5,
        }
    }
}

impl ResourceEnvelope {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.disk_capacity_gib,
            self.ram_gib,
            self.index_size_gib,
            self.fastq_expansion_default,
            self.fastq_expansion_max,
            self.sort_memory_default_gib,
            self.sort_memory_max_gib,
        ];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err("resource envelope values must be positive".into());
        }
        if self.fastq_expansion_max < self.fastq_expansion_default {
            return Err("fastq_expansion_max below fastq_expansion_default".into());
        }
        Ok(())
    }
}

/// Peak scratch disk in bytes: SRA + FASTQ + BAM, with BAM bounded by FASTQ.
pub fn required_disk_bytes(task: &TaskSpec, envelope: &ResourceEnvelope) -> f64 {
    let sra = task.compressed_size_bytes as f64;
    let expansion = task
        .fastq_expansion_factor
        .unwrap_or(envelope.fastq_expansion_default);
    let fastq = expansion * sra;
    sra + fastq + fastq
}

pub fn required_disk_gib(task: &TaskSpec, envelope: &ResourceEnvelope) -> f64 {
    required_disk_bytes(task, envelope) / GIB
}

pub fn disk_admits(task: &TaskSpec, envelope: &ResourceEnvelope) -> bool {
    required_disk_gib(task, envelope) <= envelope.disk_capacity_gib
}

/// RAM needed while aligning and sorting: the index plus the sort buffer.
pub fn required_ram_gib(task: &TaskSpec, envelope: &ResourceEnvelope) -> f64 {
    envelope.index_size_gib + task.sort_memory_gib.unwrap_or(envelope.sort_memory_default_gib)
}

pub fn memory_admits(task: &TaskSpec, envelope: &ResourceEnvelope) -> bool {
    envelope.ram_gib >= required_ram_gib(task, envelope)
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub worker_id: String,
    /// Queues this worker serves, in preference order.
    pub serves: Vec<QueueId>,
    pub retry_limit: u32,
    /// Visibility used until a task-specific estimate is known.
    pub initial_visibility_seconds: f64,
    pub min_visibility_seconds: f64,
    pub workdir_root: PathBuf,
    pub index_dir: PathBuf,
    pub threads: u32,
    pub keep_workdirs: bool,
}

impl WorkerConfig {
    pub fn new(worker_id: impl Into<String>, workdir_root: impl Into<PathBuf>) -> Self {
        Self {
            worker_id: worker_id.into(),
            serves: vec![QueueId::Small, QueueId::Large],
            retry_limit: 3,
            initial_visibility_seconds: 1800.0,
            min_visibility_seconds: 60.0,
            workdir_root: workdir_root.into(),
            index_dir: PathBuf::from("index"),
            threads: 8,
            keep_workdirs: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker_id: String,
    pub tasks_completed: u64,
    pub tasks_terminated_early: u64,
    pub tasks_failed: u64,
    pub tasks_retried: u64,
    pub tasks_skipped: u64,
    pub tasks_rerouted: u64,
    pub tasks_requeued: u64,
    pub duplicate_completions: u64,
    pub stage_seconds: BTreeMap<Stage, f64>,
    pub index_load_seconds: f64,
    pub wasted_seconds: f64,
    pub interrupted: bool,
}

impl WorkerReport {
    /// Tasks newly brought to a final state by this worker.
    pub fn processed(&self) -> u64 {
        self.tasks_completed + self.tasks_failed
    }

    pub fn merge(&mut self, other: &WorkerReport) {
        self.tasks_completed += other.tasks_completed;
        self.tasks_terminated_early += other.tasks_terminated_early;
        self.tasks_failed += other.tasks_failed;
        self.tasks_retried += other.tasks_retried;
        self.tasks_skipped += other.tasks_skipped;
        self.tasks_rerouted += other.tasks_rerouted;
        self.tasks_requeued += other.tasks_requeued;
        self.duplicate_completions += other.duplicate_completions;
        for (stage, s) in &other.stage_seconds {
            *self.stage_seconds.entry(*stage).or_default() += s;
        }
        self.index_load_seconds += other.index_load_seconds;
        self.wasted_seconds += other.wasted_seconds;
        self.interrupted |= other.interrupted;
    }
}

/// Why a task attempt did not complete.
#[derive(Debug, Error)]
pub enum TaskError {
    #[error("needs {needed_gib:.1} GiB scratch disk, have {capacity_gib:.1} GiB")]
    DiskAdmissionRejected { needed_gib: f64, capacity_gib: f64 },
    #[error("needs {needed_gib:.1} GiB RAM, have {capacity_gib:.1} GiB")]
    MemoryAdmissionRejected { needed_gib: f64, capacity_gib: f64 },
    #[error("out of memory during sort")]
    OutOfMemorySort,
    #[error("executor failure: {0}")]
    ExecutorFailure(ExecError),
}

#[derive(Debug, Error)]
pub enum WorkerRunError {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    State(#[from] WorkerError),
    #[error("index load failed: {0}")]
    IndexLoad(ExecError),
}

struct Lease {
    queue: QueueId,
    receipt: Receipt,
    workdir: PathBuf,
    elapsed: f64,
}

pub struct Worker<'a> {
    config: WorkerConfig,
    queues: &'a QueueSet,
    ledger: &'a Ledger,
    executor: &'a dyn Executor,
    policy: EarlyStopPolicy,
    envelope: ResourceEnvelope,
    clock: &'a dyn Clock,
    kill: KillSwitch,
    state: WorkerState,
    report: WorkerReport,
    lease: Option<Lease>,
}

impl<'a> Worker<'a> {
    pub fn new(
        config: WorkerConfig,
        queues: &'a QueueSet,
        ledger: &'a Ledger,
        executor: &'a dyn Executor,
        policy: EarlyStopPolicy,
        envelope: ResourceEnvelope,
        clock: &'a dyn Clock,
    ) -> Self {
        let report = WorkerReport {
            worker_id: config.worker_id.clone(),
            ..WorkerReport::default()
        };
        Self {
            config,
            queues,
            ledger,
            executor,
            policy,
            envelope,
            clock,
            kill: KillSwitch::new(),
            state: WorkerState::default(),
            report,
            lease: None,
        }
    }

    /// Handle for delivering an interruption notice from another thread.
    pub fn interrupt_handle(&self) -> KillSwitch {
        self.kill.clone()
    }

    pub fn state(&self) -> &WorkerState {
        &self.state
    }

    pub fn report(&self) -> &WorkerReport {
        &self.report
    }

    /// Runs until the queues have nothing visible or an interruption arrives.
    pub fn run(mut self) -> Result<WorkerReport, WorkerRunError> {
        self.state.transition(Phase::LoadingIndex)?;
        match self.executor.load_index(&self.kill, self.clock) {
            Ok(seconds) => {
                self.report.index_load_seconds += seconds;
                self.state.index_loaded = true;
            }
            Err(ExecError::Interrupted { seconds }) => {
                self.report.wasted_seconds += seconds;
                self.handle_interruption(120.0);
                return Ok(self.report);
            }
            Err(e) => return Err(WorkerRunError::IndexLoad(e)),
        }
        self.state.transition(Phase::Polling)?;

        loop {
            if self.kill.interrupted() {
                self.handle_interruption(120.0);
                break;
            }
            let now = self.clock.now();
            let Some((queue, msg)) =
                self.queues
                    .lease(&self.config.serves, self.config.initial_visibility_seconds, now)?
            else {
                self.state.transition(Phase::Draining)?;
                self.state.transition(Phase::Terminated)?;
                break;
            };
            self.process(queue, msg)?;
            if self.state.phase == Phase::Terminated {
                break;
            }
        }
        Ok(self.report)
    }

    fn process(&mut self, queue: QueueId, msg: QueueMessage) -> Result<(), WorkerRunError> {
        let receipt = msg.receipt.expect("leased message has a receipt");
        let task = msg.task;
        let now = self.clock.now();
        if self.ledger.already_processed(&task.sra_id) {
            log::debug!("{}: {} already processed, skipping", self.config.worker_id, task.sra_id);
            self.report.tasks_skipped += 1;
            ack_quiet(self.queues, queue, &receipt, now);
            return Ok(());
        }

        let visibility = self
            .executor
            .estimate_seconds(&task)
            .map(|e| (2.0 * e).max(self.config.min_visibility_seconds))
            .unwrap_or(self.config.initial_visibility_seconds);
        if let Err(e) = self.queues.queue(queue).extend(&receipt, visibility, now) {
            log::warn!("{}: cannot extend lease: {e}", self.config.worker_id);
        }
        let workdir = self
            .config
            .workdir_root
            .join(&self.config.worker_id)
            .join(&task.sra_id);
        self.lease = Some(Lease {
            queue,
            receipt,
            workdir: workdir.clone(),
            elapsed: 0.0,
        });
        self.state.current_task = Some(task.clone());

        let mut record = LedgerRecord {
            sra_id: task.sra_id.clone(),
            status: RecordStatus::InProgress,
            worker_id: self.config.worker_id.clone(),
            stage_timings: BTreeMap::new(),
            final_mapping_rate: None,
            attempt: msg.attempt,
            terminated_early: false,
        };
        self.ledger.record(record.clone())?;

        if !disk_admits(&task, &self.envelope) {
            let err = TaskError::DiskAdmissionRejected {
                needed_gib: required_disk_gib(&task, &self.envelope),
                capacity_gib: self.envelope.disk_capacity_gib,
            };
            if queue == QueueId::Small && self.queues.is_double() {
                log::info!("{}: {} rerouted to large queue: {err}", self.config.worker_id, task.sra_id);
                self.queues.queue(QueueId::Large).enqueue(task.clone(), now)?;
                ack_quiet(self.queues, queue, &receipt, now);
                self.report.tasks_rerouted += 1;
                self.finish_task();
                return Ok(());
            }
            return self.fail(record, err);
        }
        if !memory_admits(&task, &self.envelope) {
            let err = TaskError::MemoryAdmissionRejected {
                needed_gib: required_ram_gib(&task, &self.envelope),
                capacity_gib: self.envelope.ram_gib,
            };
            return self.fail(record, err);
        }

        if let Err(e) = std::fs::create_dir_all(&workdir) {
            return self.fail(record, TaskError::ExecutorFailure(e.into()));
        }

        for stage in Stage::ALL {
            self.state.transition(stage.phase())?;
            let outcome = {
                let queues = self.queues;
                let clock = self.clock;
                let mut last_extend = clock.now();
                let mut heartbeat = || {
                    let now = clock.now();
                    if now - last_extend >= visibility / 2.0 {
                        match queues.queue(queue).extend(&receipt, visibility, now) {
                            Ok(_) => last_extend = now,
                            Err(e) => log::warn!("lease heartbeat failed: {e}"),
                        }
                    }
                };
                let mut ctx = StageContext {
                    task: &task,
                    workdir: &workdir,
                    index_dir: &self.config.index_dir,
                    threads: self.config.threads,
                    policy: &self.policy,
                    kill: &self.kill,
                    clock,
                    heartbeat: &mut heartbeat,
                };
                self.executor.run_stage(stage, &mut ctx)
            };
            match outcome {
                Ok(out) => {
                    record.stage_timings.insert(stage, out.seconds);
                    *self.report.stage_seconds.entry(stage).or_default() += out.seconds;
                    if let Some(l) = self.lease.as_mut() {
                        l.elapsed += out.seconds;
                    }
                    if stage == Stage::Align {
                        record.final_mapping_rate = out.final_mapping_rate;
                        if let Some(decision) = out.early_stop {
                            log::info!(
                                "{}: {} stopped early at rate {:?}",
                                self.config.worker_id,
                                task.sra_id,
                                decision.observed_rate
                            );
                            record.terminated_early = true;
                            self.state.transition(Phase::Polling)?;
                            return self.complete(record);
                        }
                    }
                }
                Err(ExecError::Interrupted { seconds }) => {
                    record.stage_timings.insert(stage, seconds);
                    *self.report.stage_seconds.entry(stage).or_default() += seconds;
                    if let Some(l) = self.lease.as_mut() {
                        l.elapsed += seconds;
                    }
                    self.handle_interruption(120.0);
                    return Ok(());
                }
                Err(e) => {
                    let seconds = e.seconds();
                    record.stage_timings.insert(stage, seconds);
                    *self.report.stage_seconds.entry(stage).or_default() += seconds;
                    self.state.transition(Phase::Polling)?;
                    let err = match e {
                        ExecError::OutOfMemory { .. } => TaskError::OutOfMemorySort,
                        other => TaskError::ExecutorFailure(other),
                    };
                    return self.fail(record, err);
                }
            }
        }
        self.state.transition(Phase::Polling)?;
        self.complete(record)
    }

    fn complete(&mut self, mut record: LedgerRecord) -> Result<(), WorkerRunError> {
        let lease = self.lease.as_ref().expect("active lease");
        let now = self.clock.now();
        record.status = RecordStatus::Completed;
        match self.ledger.record(record.clone()) {
            Ok(()) => {
                self.report.tasks_completed += 1;
                if record.terminated_early {
                    self.report.tasks_terminated_early += 1;
                }
            }
            Err(LedgerError::ConflictingCompletion(id)) => {
                log::warn!("{}: duplicate completion for {id} ignored", self.config.worker_id);
                self.report.duplicate_completions += 1;
            }
            Err(e) => return Err(e.into()),
        }
        ack_quiet(self.queues, lease.queue, &lease.receipt, now);
        self.finish_task();
        Ok(())
    }

    /// Records a failed attempt; retries until `retry_limit` failures, then
    /// drops the message for good.
    fn fail(&mut self, mut record: LedgerRecord, err: TaskError) -> Result<(), WorkerRunError> {
        let lease = self.lease.as_ref().expect("active lease");
        let now = self.clock.now();
        log::warn!("{}: {} failed: {err}", self.config.worker_id, record.sra_id);
        record.status = RecordStatus::Failed;
        self.ledger.record(record.clone())?;
        let failures = self.ledger.failure_count(&record.sra_id);
        if failures >= self.config.retry_limit {
            self.report.tasks_failed += 1;
            ack_quiet(self.queues, lease.queue, &lease.receipt, now);
        } else {
            self.report.tasks_retried += 1;
            if let Err(e) = self.queues.queue(lease.queue).nack(&lease.receipt, now) {
                log::warn!("nack failed: {e}");
            }
        }
        self.finish_task();
        Ok(())
    }

    fn finish_task(&mut self) {
        if let Some(lease) = self.lease.take() {
            if !self.config.keep_workdirs {
                remove_dir_quiet(&lease.workdir);
            }
        }
        self.state.current_task = None;
        if self.state.phase.is_stage() {
            let _ = self.state.transition(Phase::Polling);
        }
    }

    /// Reacts to a spot interruption notice: return the task to the queue,
    /// drop partial outputs and stop. Work done on the task so far is wasted.
    pub fn handle_interruption(&mut self, notice_deadline_seconds: f64) {
        let started = self.clock.now();
        self.kill.fire(KillReason::Interruption);
        self.report.interrupted = true;
        if let Some(lease) = self.lease.take() {
            let now = self.clock.now();
            if let Err(e) = self.queues.queue(lease.queue).nack(&lease.receipt, now) {
                log::warn!("{}: nack on interruption failed: {e}", self.config.worker_id);
            }
            self.report.tasks_requeued += 1;
            self.report.wasted_seconds += lease.elapsed;
            remove_dir_quiet(&lease.workdir);
        }
        self.state.current_task = None;
        if self.state.phase != Phase::Terminated {
            let _ = self.state.transition(Phase::Draining);
            let _ = self.state.transition(Phase::Terminated);
        }
        let spent = self.clock.now() - started;
        if spent > notice_deadline_seconds {
            log::warn!(
                "{}: interruption handling took {spent:.1}s, past the {notice_deadline_seconds}s notice",
                self.config.worker_id
            );
        }
    }
}

fn ack_quiet(queues: &QueueSet, queue: QueueId, receipt: &Receipt, now: f64) {
    if let Err(e) = queues.queue(queue).ack(receipt, now) {
        log::warn!("ack failed: {e}");
    }
}

fn remove_dir_quiet(dir: &Path) {
    if dir.exists() {
        if let Err(e) = std::fs::remove_dir_all(dir) {
            log::warn!("cannot remove {}: {e}", dir.display());
        }
    }
}
