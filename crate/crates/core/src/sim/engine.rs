use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::executor::{InjectedFailure, SyntheticExecutor};
use crate::ledger::{Ledger, LedgerRecord, RecordStatus};
use crate::manifest::TaskSpec;
use crate::progress::StopDecision;
use crate::queue::{QueueMessage, WorkQueue};
use crate::worker::{disk_admits, memory_admits, Stage};

use super::cost::{cost_of, per_worker_rate};
use super::scenario::{InterruptionModel, ScenarioError, SimScenario};
use super::trace::{EventKind, FleetTrace, TraceEvent};
use super::SimSummary;

// The simulator acks, nacks and stops instances itself, so leases never lapse.
const LEASE_SECONDS: f64 = 1e15;
const MAX_EVENTS: u64 = 50_000_000;

#[derive(Debug, Clone, Copy)]
enum Action {
    Launch { slot: u32, replacement: bool },
    LoadCheck { generation: u64 },
    StageDone { instance: usize },
    Interrupt { instance: usize },
    SlotInterrupt { slot: u32 },
}

struct Scheduled {
    at: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then(other.seq.cmp(&self.seq))
    }
}

struct Job {
    message: QueueMessage,
    start: f64,
    plan: Vec<(Stage, f64)>,
    next: usize,
    early_stop: Option<StopDecision>,
    final_rate: Option<f64>,
    full_align: f64,
    fail_at: Option<(Stage, &'static str)>,
    timings: BTreeMap<Stage, f64>,
}

struct Instance {
    slot: u32,
    start: f64,
    stop: Option<f64>,
    replacement: bool,
    loaded: bool,
    job: Option<Job>,
}

/// Fluid processor-sharing model of index downloads.
struct Loaders {
    remaining: BTreeMap<usize, f64>,
    last: f64,
    generation: u64,
}

struct Sim<'a> {
    sc: &'a SimScenario,
    exec: SyntheticExecutor,
    queue: WorkQueue,
    ledger: Ledger,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    events: Vec<TraceEvent>,
    instances: Vec<Instance>,
    slot_owner: Vec<Option<usize>>,
    loaders: Loaders,
    total_tasks: usize,
    finalized: HashSet<String>,
    interrupt_clock: Option<Exp<f64>>,
    wasted_seconds: f64,
    interruptions: u64,
    files_failed: u64,
    early_stopped: u64,
    align_seconds: f64,
    align_seconds_baseline: f64,
    mapping_rates: Vec<f64>,
}

impl<'a> Sim<'a> {
    fn schedule(&mut self, at: f64, action: Action) {
        self.seq += 1;
        self.heap.push(Scheduled {
            at,
            seq: self.seq,
            action,
        });
    }

    fn emit(&mut self, instance: usize, kind: EventKind, sra_id: &str, detail: impl Into<String>) {
        self.events.push(TraceEvent {
            timestamp: self.now,
            worker_id: instance as u32,
            slot: self.instances[instance].slot,
            kind,
            sra_id: sra_id.to_string(),
            detail: detail.into(),
        });
    }

    fn work_remains(&self) -> bool {
        self.finalized.len() < self.total_tasks
    }

    fn loader_rate(&self) -> f64 {
        per_worker_rate(
            self.loaders.remaining.len(),
            self.sc.server_bandwidth_gib_s,
            self.sc.per_worker_bandwidth_gib_s,
        )
    }

    fn advance_loaders(&mut self) {
        if !self.loaders.remaining.is_empty() {
            let moved = self.loader_rate() * (self.now - self.loaders.last);
            for rem in self.loaders.remaining.values_mut() {
                *rem -= moved;
            }
        }
        self.loaders.last = self.now;
    }

    fn reschedule_loaders(&mut self) {
        self.loaders.generation += 1;
        if let Some(min) = self.loaders.remaining.values().copied().reduce(f64::min) {
            let at = self.now + min.max(0.0) / self.loader_rate();
            let generation = self.loaders.generation;
            self.schedule(at, Action::LoadCheck { generation });
        }
    }

    fn launch(&mut self, slot: u32, replacement: bool) {
        let id = self.instances.len();
        self.instances.push(Instance {
            slot,
            start: self.now,
            stop: None,
            replacement,
            loaded: false,
            job: None,
        });
        self.slot_owner[slot as usize] = Some(id);
        self.emit(id, EventKind::WorkerStart, "", if replacement { "replacement" } else { "initial" });
        if let Some(exp) = self.interrupt_clock {
            let after = exp.sample(&mut self.rng);
            self.schedule(self.now + after, Action::Interrupt { instance: id });
        }
        self.advance_loaders();
        self.loaders.remaining.insert(id, self.sc.index_size_gib);
        self.reschedule_loaders();
    }

    fn load_check(&mut self, generation: u64) {
        if generation != self.loaders.generation {
            return;
        }
        self.advance_loaders();
        let eps = self.sc.index_size_gib * 1e-9;
        let done: Vec<usize> = self
            .loaders
            .remaining
            .iter()
            .filter(|(_, rem)| **rem <= eps)
            .map(|(id, _)| *id)
            .collect();
        for id in &done {
            self.loaders.remaining.remove(id);
        }
        self.reschedule_loaders();
        for id in done {
            let inst = &mut self.instances[id];
            inst.loaded = true;
            if inst.replacement {
                self.wasted_seconds += self.now - inst.start;
            }
            self.emit(id, EventKind::IndexLoaded, "", "");
            self.poll(id);
        }
    }

    fn stop(&mut self, id: usize, detail: &str) {
        self.instances[id].stop = Some(self.now);
        let slot = self.instances[id].slot as usize;
        if self.slot_owner[slot] == Some(id) {
            self.slot_owner[slot] = None;
        }
        self.emit(id, EventKind::WorkerStop, "", detail);
    }

    /// Lease the next task or shut the instance down.
    fn poll(&mut self, id: usize) {
        loop {
            let msg = self
                .queue
                .lease(LEASE_SECONDS, self.now)
                .expect("in-memory queue");
            let Some(msg) = msg else {
                self.stop(id, "drained");
                return;
            };
            if self.ledger.already_processed(&msg.task.sra_id) {
                let receipt = msg.receipt.expect("leased");
                self.queue.ack(&receipt, self.now).expect("live receipt");
                continue;
            }
            self.start_job(id, msg);
            return;
        }
    }

    fn start_job(&mut self, id: usize, message: QueueMessage) {
        let task = message.task.clone();
        self.emit(id, EventKind::TaskStart, &task.sra_id, message.attempt.to_string());
        self.record(id, &task, RecordStatus::InProgress, message.attempt, BTreeMap::new(), None, false);
        // one draw per attempt keeps the random stream independent of outcomes
        let random_oom = self.rng.random::<f64>() < self.sc.failure_probability;

        let mut job = Job {
            message,
            start: self.now,
            plan: Vec::new(),
            next: 0,
            early_stop: None,
            final_rate: None,
            full_align: 0.0,
            fail_at: None,
            timings: BTreeMap::new(),
        };
        if !disk_admits(&task, &self.sc.envelope) {
            self.instances[id].job = Some(job);
            self.fail(id, "disk_admission");
            return;
        }
        if !memory_admits(&task, &self.sc.envelope) {
            self.instances[id].job = Some(job);
            self.fail(id, "memory_admission");
            return;
        }
        let align = self.exec.plan_align(&task, &self.sc.policy);
        job.full_align = self.exec.align_seconds(&task);
        job.plan.push((Stage::Prefetch, self.exec.stage_seconds(Stage::Prefetch, &task)));
        job.plan.push((Stage::Convert, self.exec.stage_seconds(Stage::Convert, &task)));
        job.plan.push((Stage::Align, align.seconds));
        if align.early_stop.is_none() {
            job.plan.push((Stage::SortNormalize, self.exec.stage_seconds(Stage::SortNormalize, &task)));
            job.plan.push((Stage::Upload, self.exec.stage_seconds(Stage::Upload, &task)));
        }
        job.early_stop = align.early_stop;
        job.final_rate = align.final_mapping_rate;
        job.fail_at = match self.sc.forced_failures.get(&task.sra_id) {
            Some((stage, InjectedFailure::OutOfMemory)) => Some((*stage, "out_of_memory")),
            Some((stage, InjectedFailure::Crash)) => Some((*stage, "crash")),
            None if random_oom => Some((Stage::SortNormalize, "out_of_memory")),
            None => None,
        };
        let first = job.plan[0].1;
        self.instances[id].job = Some(job);
        self.schedule(self.now + first, Action::StageDone { instance: id });
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        id: usize,
        task: &TaskSpec,
        status: RecordStatus,
        attempt: u32,
        stage_timings: BTreeMap<Stage, f64>,
        final_mapping_rate: Option<f64>,
        terminated_early: bool,
    ) {
        let rec = LedgerRecord {
            sra_id: task.sra_id.clone(),
            status,
            worker_id: format!("w{id}"),
            stage_timings,
            final_mapping_rate,
            attempt,
            terminated_early,
        };
        if let Err(e) = self.ledger.record(rec) {
            log::warn!("ledger rejected record: {e}");
        }
    }

    fn stage_done(&mut self, id: usize) {
        if self.instances[id].stop.is_some() {
            return;
        }
        let job = self.instances[id].job.as_mut().expect("stage without a job");
        let (stage, secs) = job.plan[job.next];
        job.timings.insert(stage, secs);
        job.next += 1;
        let sra_id = job.message.task.sra_id.clone();
        let fail = job.fail_at.filter(|(s, _)| *s == stage).map(|(_, why)| why);
        let early = stage == Stage::Align && job.early_stop.is_some();
        let next = job.plan.get(job.next).map(|(_, s)| *s);
        self.emit(id, EventKind::StageDone, &sra_id, stage.name());
        if let Some(why) = fail {
            self.fail(id, why);
        } else if early {
            let rate = self.instances[id].job.as_ref().and_then(|j| j.final_rate);
            self.emit(id, EventKind::EarlyStop, &sra_id, rate.map_or(String::new(), |r| r.to_string()));
            self.complete(id);
        } else if let Some(secs) = next {
            self.schedule(self.now + secs, Action::StageDone { instance: id });
        } else {
            self.complete(id);
        }
    }

    fn complete(&mut self, id: usize) {
        let job = self.instances[id].job.take().expect("job");
        let task = &job.message.task;
        let early = job.early_stop.is_some();
        self.align_seconds += job.timings.get(&Stage::Align).copied().unwrap_or(0.0);
        self.align_seconds_baseline += job.full_align;
        if early {
            self.early_stopped += 1;
        } else if let Some(rate) = job.final_rate {
            self.mapping_rates.push(rate);
        }
        self.record(id, task, RecordStatus::Completed, job.message.attempt, job.timings.clone(), job.final_rate, early);
        let receipt = job.message.receipt.expect("leased");
        self.queue.ack(&receipt, self.now).expect("live receipt");
        self.finalized.insert(task.sra_id.clone());
        self.emit(id, EventKind::TaskComplete, &task.sra_id, if early { "early_stop" } else { "" });
        self.poll(id);
    }

    fn fail(&mut self, id: usize, why: &str) {
        let job = self.instances[id].job.take().expect("job");
        let task = &job.message.task;
        self.record(id, task, RecordStatus::Failed, job.message.attempt, job.timings.clone(), None, false);
        let receipt = job.message.receipt.expect("leased");
        let terminal = self.ledger.failure_count(&task.sra_id) >= self.sc.retry_limit;
        if terminal {
            self.queue.ack(&receipt, self.now).expect("live receipt");
            self.finalized.insert(task.sra_id.clone());
            self.files_failed += 1;
        } else {
            self.queue.nack(&receipt, self.now).expect("live receipt");
        }
        let detail = if terminal { format!("{why};terminal") } else { why.to_string() };
        self.emit(id, EventKind::TaskFailed, &task.sra_id, detail);
        self.poll(id);
    }

    fn interrupt(&mut self, id: usize) {
        if self.instances[id].stop.is_some() {
            return;
        }
        self.interruptions += 1;
        let (sra_id, detail) = if let Some(job) = self.instances[id].job.take() {
            self.wasted_seconds += self.now - job.start;
            let receipt = job.message.receipt.expect("leased");
            self.queue.nack(&receipt, self.now).expect("live receipt");
            (job.message.task.sra_id, "task")
        } else if !self.instances[id].loaded {
            self.wasted_seconds += self.now - self.instances[id].start;
            self.advance_loaders();
            self.loaders.remaining.remove(&id);
            self.reschedule_loaders();
            (String::new(), "index_load")
        } else {
            (String::new(), "idle")
        };
        self.emit(id, EventKind::Interrupted, &sra_id, detail);
        self.stop(id, "interrupted");
        if self.work_remains() {
            let slot = self.instances[id].slot;
            self.schedule(
                self.now + self.sc.provisioning_delay_seconds,
                Action::Launch {
                    slot,
                    replacement: true,
                },
            );
        }
    }

    fn run(&mut self) -> Result<(), ScenarioError> {
        let mut processed = 0u64;
        while let Some(next) = self.heap.pop() {
            processed += 1;
            if processed > MAX_EVENTS {
                return Err(ScenarioError::Invalid(
                    "simulation did not converge; interruption rate too high for task durations".into(),
                ));
            }
            self.now = next.at;
            match next.action {
                Action::Launch { slot, replacement } => {
                    if replacement && !self.work_remains() {
                        continue;
                    }
                    self.launch(slot, replacement);
                }
                Action::LoadCheck { generation } => self.load_check(generation),
                Action::StageDone { instance } => self.stage_done(instance),
                Action::Interrupt { instance } => self.interrupt(instance),
                Action::SlotInterrupt { slot } => {
                    if let Some(instance) = self.slot_owner[slot as usize] {
                        self.interrupt(instance);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn simulate(scenario: &SimScenario) -> Result<(FleetTrace, SimSummary), ScenarioError> {
    scenario.validate()?;
    let tasks = scenario.resolve_tasks()?;
    let queue = WorkQueue::in_memory();
    let mut ids = HashSet::new();
    for task in &tasks {
        if !ids.insert(task.sra_id.clone()) {
            return Err(ScenarioError::Invalid(format!("duplicate task id {:?}", task.sra_id)));
        }
        queue.enqueue(task.clone(), 0.0).expect("in-memory queue");
    }
    let interrupt_clock = match &scenario.interruption {
        InterruptionModel::Poisson { rate_per_instance_hour } if *rate_per_instance_hour > 0.0 => {
            Some(Exp::new(rate_per_instance_hour / 3600.0).expect("positive rate"))
        }
        _ => None,
    };
    let mut sim = Sim {
        sc: scenario,
        exec: SyntheticExecutor::new(scenario.synthetic_config()),
        queue,
        ledger: Ledger::in_memory(),
        rng: ChaCha8Rng::seed_from_u64(scenario.seed),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        events: Vec::new(),
        instances: Vec::new(),
        slot_owner: vec![None; scenario.fleet_size as usize],
        loaders: Loaders {
            remaining: BTreeMap::new(),
            last: 0.0,
            generation: 0,
        },
        total_tasks: tasks.len(),
        finalized: HashSet::new(),
        interrupt_clock,
        wasted_seconds: 0.0,
        interruptions: 0,
        files_failed: 0,
        early_stopped: 0,
        align_seconds: 0.0,
        align_seconds_baseline: 0.0,
        mapping_rates: Vec::new(),
    };
    if !tasks.is_empty() {
        for slot in 0..scenario.fleet_size {
            let at = if scenario.start_stagger_seconds > 0.0 {
                sim.rng.random_range(0.0..=scenario.start_stagger_seconds)
            } else {
                0.0
            };
            sim.schedule(
                at,
                Action::Launch {
                    slot,
                    replacement: false,
                },
            );
        }
        if let InterruptionModel::Trace { events } = &scenario.interruption {
            for ev in events {
                sim.schedule(ev.at, Action::SlotInterrupt { slot: ev.slot });
            }
        }
    }
    sim.run()?;

    let trace = FleetTrace { events: sim.events };
    let instance_seconds: f64 = sim
        .instances
        .iter()
        .map(|i| i.stop.unwrap_or(sim.now) - i.start)
        .sum();
    let initial_index_loaded_seconds = trace
        .of_kind(EventKind::IndexLoaded)
        .filter(|e| !sim.instances[e.worker_id as usize].replacement)
        .map(|e| e.timestamp)
        .reduce(f64::max);
    let cost = cost_of(
        &trace,
        &scenario.pricing,
        scenario.instance.price_per_hour,
        scenario.index_size_gib,
        scenario.envelope.disk_capacity_gib,
    );
    let avg_mapping_rate = if sim.mapping_rates.is_empty() {
        None
    } else {
        Some(sim.mapping_rates.iter().sum::<f64>() / sim.mapping_rates.len() as f64)
    };
    let summary = SimSummary {
        node_hours: instance_seconds / 3600.0,
        files_completed: sim.ledger.completed_count() as u64,
        files_failed: sim.files_failed,
        early_stopped: sim.early_stopped,
        interruptions: sim.interruptions,
        wasted_seconds: sim.wasted_seconds,
        wasted_fraction: if instance_seconds > 0.0 {
            sim.wasted_seconds / instance_seconds
        } else {
            0.0
        },
        cost,
        avg_mapping_rate,
        makespan_seconds: trace.end_time(),
        instances_launched: sim.instances.len() as u64,
        initial_index_loaded_seconds,
        align_seconds: sim.align_seconds,
        align_seconds_without_early_stop: sim.align_seconds_baseline,
        duplicate_completions: sim.ledger.duplicate_completions(),
        tasks_in_queue: sim.queue.len() as u64,
    };
    Ok((trace, summary))
}
