//! Stage execution backends.
//!
//! [`SubprocessExecutor`] runs templated shell commands and tails the
//! aligner's progress log while the align stage runs. [`SyntheticExecutor`]
//! models stage durations and writes deterministic progress logs in the same
//! column layout, so one supervisor path serves both.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::manifest::TaskSpec;
use crate::perf::{align_duration, SizeClassScaling};
use crate::progress::{
    evaluate, format_progress_line, mapping_rate, parse_final_mapping_rate, parse_progress_line,
    ColumnMap, EarlyStopPolicy, LogTail, ProgressSample, StopDecision, PROGRESS_HEADER,
};
use crate::worker::Stage;

pub const PROGRESS_FILE: &str = "Log.progress.out";
pub const FINAL_LOG_FILE: &str = "Log.final.out";

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("failed to spawn {command:?}: {source}")]
    SpawnFailure {
        command: String,
        source: std::io::Error,
    },
    #[error("timed out after {seconds:.1}s")]
    Timeout { seconds: f64 },
    #[error("killed by early-stop policy after {seconds:.1}s")]
    KilledByPolicy { seconds: f64 },
    #[error("interrupted after {seconds:.1}s")]
    Interrupted { seconds: f64 },
    #[error("out of memory after {seconds:.1}s")]
    OutOfMemory { seconds: f64 },
    #[error("exited with status {code:?} after {seconds:.1}s")]
    Failed { code: Option<i32>, seconds: f64 },
    #[error("bad command template {template:?}: {reason}")]
    Template { template: String, reason: String },
    #[error("executor I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl ExecError {
    /// Wall time spent before the error, when known.
    pub fn seconds(&self) -> f64 {
        match self {
            ExecError::Timeout { seconds }
            | ExecError::KilledByPolicy { seconds }
            | ExecError::Interrupted { seconds }
            | ExecError::OutOfMemory { seconds }
            | ExecError::Failed { seconds, .. } => *seconds,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillReason {
    Policy,
    Interruption,
}

/// Shared flag a supervisor or interruption handler sets to stop the running
/// child. Interruption takes precedence over policy.
#[derive(Debug, Clone, Default)]
pub struct KillSwitch(Arc<AtomicU8>);

impl KillSwitch {
    const POLICY: u8 = 1;
    const INTERRUPTION: u8 = 2;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn fire(&self, reason: KillReason) {
        let v = match reason {
            KillReason::Policy => Self::POLICY,
            KillReason::Interruption => Self::INTERRUPTION,
        };
        self.0.fetch_max(v, Ordering::SeqCst);
    }

    pub fn reason(&self) -> Option<KillReason> {
        match self.0.load(Ordering::SeqCst) {
            Self::POLICY => Some(KillReason::Policy),
            Self::INTERRUPTION => Some(KillReason::Interruption),
            _ => None,
        }
    }

    pub fn interrupted(&self) -> bool {
        self.reason() == Some(KillReason::Interruption)
    }

    /// Clears a policy kill; interruptions are sticky.
    pub fn clear_policy(&self) {
        let _ = self
            .0
            .compare_exchange(Self::POLICY, 0, Ordering::SeqCst, Ordering::SeqCst);
    }
}

/// Substitutes `{sra_id}`, `{workdir}`, `{threads}` and `{index_dir}`.
pub fn render_command(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, ExecError> {
    let bad = |reason: String| ExecError::Template {
        template: template.to_string(),
        reason,
    };
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| bad("unclosed '{'".into()))?;
        let name = &after[..close];
        let value = vars
            .get(name)
            .ok_or_else(|| bad(format!("unknown placeholder {{{name}}}")))?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    if rest.contains('}') {
        return Err(bad("stray '}'".into()));
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageRun {
    pub exit_code: Option<i32>,
    pub success: bool,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ExecLimits {
    pub timeout_seconds: Option<f64>,
    pub grace_seconds: f64,
    pub poll_seconds: f64,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            timeout_seconds: None,
            grace_seconds: 10.0,
            poll_seconds: 0.1,
        }
    }
}

fn signal_group(pid: u32, signal: libc::c_int) {
    // The child leads its own process group, so this reaches the shell's
    // children as well.
    unsafe {
        libc::kill(-(pid as libc::pid_t), signal);
    }
}

/// Runs `command` under `sh -c` in `workdir`. `on_poll` is called between
/// child polls with the elapsed seconds; it may fire `kill`.
pub fn exec_stage(
    command: &str,
    workdir: &Path,
    log_path: Option<&Path>,
    limits: &ExecLimits,
    kill: &KillSwitch,
    mut on_poll: impl FnMut(f64),
) -> Result<StageRun, ExecError> {
    use std::os::unix::process::CommandExt;

    let (stdout, stderr) = match log_path {
        Some(p) => {
            let f = OpenOptions::new().create(true).append(true).open(p)?;
            (Stdio::from(f.try_clone()?), Stdio::from(f))
        }
        None => (Stdio::null(), Stdio::null()),
    };
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .current_dir(workdir)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .process_group(0)
        .spawn()
        .map_err(|source| ExecError::SpawnFailure {
            command: command.to_string(),
            source,
        })?;
    let start = Instant::now();
    let poll = Duration::from_secs_f64(limits.poll_seconds.max(0.001));
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(StageRun {
                exit_code: status.code(),
                success: status.success(),
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
        let elapsed = start.elapsed().as_secs_f64();
        let timed_out = limits.timeout_seconds.is_some_and(|t| elapsed >= t);
        if let Some(reason) = kill.reason() {
            terminate(&mut child, limits.grace_seconds)?;
            let seconds = start.elapsed().as_secs_f64();
            return Err(match reason {
                KillReason::Policy => ExecError::KilledByPolicy { seconds },
                KillReason::Interruption => ExecError::Interrupted { seconds },
            });
        }
        if timed_out {
            terminate(&mut child, limits.grace_seconds)?;
            return Err(ExecError::Timeout {
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        on_poll(elapsed);
        if kill.reason().is_none() {
            std::thread::sleep(poll);
        }
    }
}

/// SIGTERM, then SIGKILL once the grace period runs out.
fn terminate(child: &mut std::process::Child, grace_seconds: f64) -> std::io::Result<()> {
    let pid = child.id();
    signal_group(pid, libc::SIGTERM);
    let deadline = Instant::now() + Duration::from_secs_f64(grace_seconds.max(0.0));
    loop {
        if child.try_wait()?.is_some() {
            signal_group(pid, libc::SIGKILL);
            return Ok(());
        }
        if Instant::now() >= deadline {
            log::warn!("child {pid} ignored SIGTERM for {grace_seconds}s, killing");
            signal_group(pid, libc::SIGKILL);
            let _ = child.kill();
            child.wait()?;
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryShape {
    #[default]
    Constant,
    /// Mean rate moves linearly from `start_rate` to the final rate.
    Ramp { start_rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub final_mapping_rate: f64,
    pub read_speed_reads_per_second: f64,
    pub total_reads: u64,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub shape: TrajectoryShape,
    /// Share of mapped reads reported as multi-mapped.
    #[serde(default = "default_multi_share")]
    pub multi_share: f64,
}

fn default_multi_share() -> f64 {
    0.1
}

impl TrajectorySpec {
    pub fn new(final_mapping_rate: f64, read_speed: f64, total_reads: u64, seed: u64) -> Self {
        Self {
            final_mapping_rate,
            read_speed_reads_per_second: read_speed,
            total_reads,
            noise_std: 0.02,
            seed,
            shape: TrajectoryShape::Constant,
            multi_share: default_multi_share(),
        }
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn duration_seconds(&self) -> f64 {
        self.total_reads as f64 / self.read_speed_reads_per_second
    }
}

/// Progress samples at `poll_interval` cadence up to `total_reads`.
pub fn synth_progress(spec: &TrajectorySpec, poll_interval: f64) -> Vec<ProgressSample> {
    assert!(poll_interval > 0.0, "poll interval must be positive");
    assert!(spec.read_speed_reads_per_second > 0.0, "read speed must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let per_poll = spec.read_speed_reads_per_second * poll_interval;
    let n = (spec.total_reads as f64 / per_poll).ceil().max(1.0) as u64;
    let share = spec.multi_share.clamp(0.0, 1.0);
    (1..=n)
        .map(|k| {
            let reads = ((k as f64 * per_poll).round() as u64).min(spec.total_reads);
            let reads = if k == n { spec.total_reads } else { reads };
            let mean = match spec.shape {
                TrajectoryShape::Constant => spec.final_mapping_rate,
                TrajectoryShape::Ramp { start_rate } => {
                    let progress = k as f64 / n as f64;
                    start_rate + (spec.final_mapping_rate - start_rate) * progress
                }
            };
            let jitter = if spec.noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let rate = (mean + jitter).clamp(0.0, 1.0);
            let multi = rate * share;
            ProgressSample::new(k as f64 * poll_interval, reads, rate - multi, multi)
        })
        .collect()
}

/// Everything a stage needs from the worker.
pub struct StageContext<'a> {
    pub task: &'a TaskSpec,
    pub workdir: &'a Path,
    pub index_dir: &'a Path,
    pub threads: u32,
    pub policy: &'a EarlyStopPolicy,
    pub kill: &'a KillSwitch,
    pub clock: &'a dyn Clock,
    /// Called periodically while a stage runs; extends the lease.
    pub heartbeat: &'a mut dyn FnMut(),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageOutcome {
    pub seconds: f64,
    /// Set when the align stage was stopped by the early-stop policy.
    pub early_stop: Option<StopDecision>,
    pub final_mapping_rate: Option<f64>,
}

pub trait Executor: Send + Sync {
    /// Loads the genome index; returns seconds spent.
    fn load_index(&self, kill: &KillSwitch, clock: &dyn Clock) -> Result<f64, ExecError>;

    fn run_stage(&self, stage: Stage, ctx: &mut StageContext<'_>) -> Result<StageOutcome, ExecError>;

    /// Expected wall time for the whole pipeline on `task`, if the backend
    /// can estimate it.
    fn estimate_seconds(&self, _task: &TaskSpec) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectedFailure {
    OutOfMemory,
    Crash,
}

/// Stop the named task partway through a stage, as a spot notice would.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedInterruption {
    pub sra_id: String,
    pub stage: Stage,
    /// Fraction of the stage completed when the notice arrives.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub scaling: SizeClassScaling,
    pub threads: u32,
    /// FASTQ bytes aligned per thread-second.
    pub align_bytes_per_thread_second: f64,
    pub prefetch_bytes_per_second: f64,
    pub convert_bytes_per_second: f64,
    /// SortNormalize duration as a share of the full align time.
    pub sort_normalize_fraction: f64,
    pub upload_seconds: f64,
    pub index_load_seconds: f64,
    pub fastq_expansion_default: f64,
    pub default_mapping_rate: f64,
    pub noise_std: f64,
    /// Compressed bytes per read, used when a task's read count is unknown.
    pub bytes_per_read: f64,
    /// Interval at which the synthetic aligner writes progress lines.
    pub progress_interval_seconds: f64,
    pub seed: u64,
    /// Real sleep per modeled second (0 = no sleeping).
    pub time_scale: f64,
    pub failures: BTreeMap<String, (Stage, InjectedFailure)>,
    pub interruptions: Vec<InjectedInterruption>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scaling: SizeClassScaling::default(),
            threads: 8,
            align_bytes_per_thread_second: 2.0 * 1024.0 * 1024.0,
            prefetch_bytes_per_second: 100e6,
            convert_bytes_per_second: 50e6,
            sort_normalize_fraction: 0.05,
            upload_seconds: 10.0,
            index_load_seconds: 60.0,
            fastq_expansion_default: 7.5,
            default_mapping_rate: 0.9,
            noise_std: 0.02,
            bytes_per_read: 80.0,
            progress_interval_seconds: 60.0,
            seed: 0,
            time_scale: 0.0,
            failures: BTreeMap::new(),
            interruptions: Vec::new(),
        }
    }
}

/// Stable per-task seed.
pub fn task_seed(base: u64, sra_id: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in sra_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Default)]
pub struct SyntheticExecutor {
    config: SyntheticConfig,
    fired: Mutex<HashSet<String>>,
}

impl SyntheticExecutor {
    pub fn new(config: SyntheticConfig) -> Self {
        Self {
            config,
            fired: Mutex::new(HashSet::new()),
        }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn fastq_bytes(&self, task: &TaskSpec) -> f64 {
        task.compressed_size_bytes as f64
            * task
                .fastq_expansion_factor
                .unwrap_or(self.config.fastq_expansion_default)
    }

    /// Full (unstopped) align seconds.
    pub fn align_seconds(&self, task: &TaskSpec) -> f64 {
        let fastq = self.fastq_bytes(task).max(1.0);
        align_duration(
            self.config.scaling.for_size(fastq),
            fastq,
            f64::from(self.config.threads.max(1)),
            self.config.align_bytes_per_thread_second,
        )
        .unwrap_or(0.0)
    }

    pub fn stage_seconds(&self, stage: Stage, task: &TaskSpec) -> f64 {
        let size = task.compressed_size_bytes as f64;
        match stage {
            Stage::Prefetch => size / self.config.prefetch_bytes_per_second,
            Stage::Convert => size / self.config.convert_bytes_per_second,
            Stage::Align => self.align_seconds(task),
            Stage::SortNormalize => self.config.sort_normalize_fraction * self.align_seconds(task),
            Stage::Upload => self.config.upload_seconds,
        }
    }

    pub fn trajectory(&self, task: &TaskSpec) -> TrajectorySpec {
        let total_reads = task.expected_total_reads.unwrap_or_else(|| {
            (task.compressed_size_bytes as f64 / self.config.bytes_per_read).max(1.0) as u64
        });
        let duration = self.align_seconds(task).max(1e-9);
        TrajectorySpec {
            final_mapping_rate: task
                .final_mapping_rate
                .unwrap_or(self.config.default_mapping_rate),
            read_speed_reads_per_second: total_reads as f64 / duration,
            total_reads,
            noise_std: self.config.noise_std,
            seed: task_seed(self.config.seed, &task.sra_id),
            shape: TrajectoryShape::Constant,
            multi_share: default_multi_share(),
        }
    }

    /// Align outcome without running anything: what `run_stage(Align)` would
    /// report for an uninterrupted run.
    pub fn plan_align(&self, task: &TaskSpec, policy: &EarlyStopPolicy) -> StageOutcome {
        let full = self.align_seconds(task);
        let spec = self.trajectory(task);
        let interval = self.config.progress_interval_seconds.min(full.max(1e-9));
        let poll = policy.poll_interval_seconds;
        let mut last_rate = None;
        for sample in synth_progress(&spec, interval) {
            let mut sample = sample;
            sample.elapsed_seconds = sample.elapsed_seconds.min(full);
            last_rate = Some(mapping_rate(&sample));
            let decision = evaluate(policy, &sample, task.expected_total_reads);
            if decision.is_terminate() {
                let kill_at = ((sample.elapsed_seconds / poll).ceil() * poll).min(full);
                return StageOutcome {
                    seconds: kill_at,
                    final_mapping_rate: decision.observed_rate,
                    early_stop: Some(decision),
                };
            }
        }
        StageOutcome {
            seconds: full,
            early_stop: None,
            final_mapping_rate: last_rate,
        }
    }

    /// Fraction of `stage` after which an injected interruption fires.
    fn interruption_point(&self, task: &TaskSpec, stage: Stage) -> Option<f64> {
        let hit = self
            .config
            .interruptions
            .iter()
            .find(|i| i.sra_id == task.sra_id && i.stage == stage)?;
        let mut fired = self.fired.lock().unwrap();
        fired.insert(task.sra_id.clone()).then_some(hit.fraction.clamp(0.0, 1.0))
    }

    fn pause(&self, clock: &dyn Clock, seconds: f64) {
        if self.config.time_scale > 0.0 {
            clock.sleep(seconds * self.config.time_scale);
        }
    }

    fn run_align(&self, ctx: &mut StageContext<'_>) -> Result<StageOutcome, ExecError> {
        let full = self.align_seconds(ctx.task);
        let spec = self.trajectory(ctx.task);
        let interval = self.config.progress_interval_seconds;
        let samples = synth_progress(&spec, interval.min(full.max(1e-9)));
        let interrupt_at = self.interruption_point(ctx.task, Stage::Align).map(|f| f * full);
        let poll = ctx.policy.poll_interval_seconds;
        let columns = ColumnMap::default();

        let mut log = File::create(ctx.workdir.join(PROGRESS_FILE))?;
        writeln!(log, "{PROGRESS_HEADER}")?;
        let mut now = 0.0;
        let mut last_rate = None;
        for generated in &samples {
            let t = generated.elapsed_seconds.min(full);
            if let Some(at) = interrupt_at {
                if at <= t {
                    self.pause(ctx.clock, at - now);
                    ctx.kill.fire(KillReason::Interruption);
                    return Err(ExecError::Interrupted { seconds: at });
                }
            }
            self.pause(ctx.clock, t - now);
            now = t;
            (ctx.heartbeat)();
            if ctx.kill.interrupted() {
                return Err(ExecError::Interrupted { seconds: now });
            }
            let line = format_progress_line(generated, 0.0);
            writeln!(log, "{line}")?;
            // read back through the same parser the live supervisor uses
            let mut parsed = parse_progress_line(&line, &columns)
                .unwrap_or(*generated);
            parsed.elapsed_seconds = t;
            last_rate = Some(mapping_rate(&parsed));
            let decision = evaluate(ctx.policy, &parsed, ctx.task.expected_total_reads);
            if decision.is_terminate() {
                // the supervisor notices on its next poll tick
                let kill_at = ((t / poll).ceil() * poll).min(full);
                self.pause(ctx.clock, kill_at - now);
                return Ok(StageOutcome {
                    seconds: kill_at,
                    final_mapping_rate: decision.observed_rate,
                    early_stop: Some(decision),
                });
            }
        }
        self.pause(ctx.clock, full - now);
        Ok(StageOutcome {
            seconds: full,
            early_stop: None,
            final_mapping_rate: last_rate,
        })
    }
}

impl Executor for SyntheticExecutor {
    fn load_index(&self, _kill: &KillSwitch, clock: &dyn Clock) -> Result<f64, ExecError> {
        self.pause(clock, self.config.index_load_seconds);
        Ok(self.config.index_load_seconds)
    }

    fn run_stage(&self, stage: Stage, ctx: &mut StageContext<'_>) -> Result<StageOutcome, ExecError> {
        if ctx.kill.interrupted() {
            return Err(ExecError::Interrupted { seconds: 0.0 });
        }
        let seconds = self.stage_seconds(stage, ctx.task);
        if stage != Stage::Align {
            if let Some(f) = self.interruption_point(ctx.task, stage) {
                self.pause(ctx.clock, seconds * f);
                ctx.kill.fire(KillReason::Interruption);
                return Err(ExecError::Interrupted { seconds: seconds * f });
            }
        }
        if let Some((at, kind)) = self.config.failures.get(&ctx.task.sra_id) {
            if *at == stage {
                self.pause(ctx.clock, seconds);
                return Err(match kind {
                    InjectedFailure::OutOfMemory => ExecError::OutOfMemory { seconds },
                    InjectedFailure::Crash => ExecError::Failed {
                        code: Some(1),
                        seconds,
                    },
                });
            }
        }
        if stage == Stage::Align {
            return self.run_align(ctx);
        }
        self.pause(ctx.clock, seconds);
        (ctx.heartbeat)();
        Ok(StageOutcome {
            seconds,
            ..StageOutcome::default()
        })
    }

    fn estimate_seconds(&self, task: &TaskSpec) -> Option<f64> {
        Some(Stage::ALL.iter().map(|&s| self.stage_seconds(s, task)).sum())
    }
}

/// Shell templates per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCommands {
    pub prefetch: String,
    pub convert: String,
    pub align: String,
    pub sort_normalize: String,
    pub upload: String,
    /// Optional index-load command; run once per worker.
    #[serde(default)]
    pub load_index: Option<String>,
}

impl StageCommands {
    pub fn get(&self, stage: Stage) -> &str {
        match stage {
            Stage::Prefetch => &self.prefetch,
            Stage::Convert => &self.convert,
            Stage::Align => &self.align,
            Stage::SortNormalize => &self.sort_normalize,
            Stage::Upload => &self.upload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubprocessConfig {
    pub commands: StageCommands,
    #[serde(default)]
    pub timeout_seconds: Option<f64>,
    #[serde(default = "default_grace")]
    pub grace_seconds: f64,
    /// Child liveness poll interval.
    #[serde(default = "default_child_poll")]
    pub child_poll_seconds: f64,
    #[serde(default)]
    pub columns: ColumnMap,
    /// Exit codes treated as out-of-memory (e.g. 137 for the OOM killer).
    #[serde(default = "default_oom_codes")]
    pub oom_exit_codes: Vec<i32>,
    /// Progress log path relative to the task workdir.
    #[serde(default = "default_progress_file")]
    pub progress_file: PathBuf,
}

fn default_grace() -> f64 {
    10.0
}

fn default_child_poll() -> f64 {
    0.1
}

fn default_oom_codes() -> Vec<i32> {
    vec![137]
}

fn default_progress_file() -> PathBuf {
    PathBuf::from(PROGRESS_FILE)
}

impl SubprocessConfig {
    pub fn new(commands: StageCommands) -> Self {
        Self {
            commands,
            timeout_seconds: None,
            grace_seconds: default_grace(),
            child_poll_seconds: default_child_poll(),
            columns: ColumnMap::default(),
            oom_exit_codes: default_oom_codes(),
            progress_file: default_progress_file(),
        }
    }
}

#[derive(Debug)]
pub struct SubprocessExecutor {
    config: SubprocessConfig,
    index_dir: PathBuf,
    threads: u32,
}

impl SubprocessExecutor {
    pub fn new(config: SubprocessConfig, index_dir: PathBuf, threads: u32) -> Self {
        Self {
            config,
            index_dir,
            threads,
        }
    }

    fn limits(&self) -> ExecLimits {
        ExecLimits {
            timeout_seconds: self.config.timeout_seconds,
            grace_seconds: self.config.grace_seconds,
            poll_seconds: self.config.child_poll_seconds,
        }
    }

    fn vars(&self, task: Option<&TaskSpec>, workdir: &Path) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("sra_id", task.map(|t| t.sra_id.clone()).unwrap_or_default()),
            ("workdir", workdir.display().to_string()),
            ("threads", self.threads.to_string()),
            ("index_dir", self.index_dir.display().to_string()),
        ])
    }
}

impl Executor for SubprocessExecutor {
    fn load_index(&self, kill: &KillSwitch, _clock: &dyn Clock) -> Result<f64, ExecError> {
        let Some(template) = &self.config.commands.load_index else {
            return Ok(0.0);
        };
        let cwd = std::env::current_dir()?;
        let cmd = render_command(template, &self.vars(None, &cwd))?;
        let run = exec_stage(&cmd, &cwd, None, &self.limits(), kill, |_| {})?;
        if run.success {
            Ok(run.wall_seconds)
        } else {
            Err(ExecError::Failed {
                code: run.exit_code,
                seconds: run.wall_seconds,
            })
        }
    }

    fn run_stage(&self, stage: Stage, ctx: &mut StageContext<'_>) -> Result<StageOutcome, ExecError> {
        let cmd = render_command(self.config.commands.get(stage), &self.vars(Some(ctx.task), ctx.workdir))?;
        let log_path = ctx.workdir.join(format!("{}.log", stage.name()));
        let limits = self.limits();
        let policy = *ctx.policy;
        let expected = ctx.task.expected_total_reads;
        let kill = ctx.kill.clone();
        let mut tail = LogTail::new(ctx.workdir.join(&self.config.progress_file), self.config.columns);
        let mut next_check = policy.poll_interval_seconds;
        let mut decision: Option<StopDecision> = None;
        let mut last_rate = None;
        let heartbeat = &mut ctx.heartbeat;

        let result = exec_stage(&cmd, ctx.workdir, Some(&log_path), &limits, ctx.kill, |elapsed| {
            heartbeat();
            if stage != Stage::Align || elapsed < next_check {
                return;
            }
            next_check += policy.poll_interval_seconds;
            match tail.poll() {
                Ok(samples) => {
                    for s in &samples {
                        last_rate = Some(mapping_rate(s));
                        let d = evaluate(&policy, s, expected);
                        if d.is_terminate() {
                            decision = Some(d);
                            kill.fire(KillReason::Policy);
                            break;
                        }
                    }
                }
                Err(e) => log::warn!("cannot read {}: {e}", tail.path().display()),
            }
        });

        match result {
            Ok(run) if run.success => {
                let final_rate = if stage == Stage::Align {
                    fs::read_to_string(ctx.workdir.join(FINAL_LOG_FILE))
                        .ok()
                        .and_then(|t| parse_final_mapping_rate(&t))
                        .or(last_rate)
                } else {
                    None
                };
                Ok(StageOutcome {
                    seconds: run.wall_seconds,
                    early_stop: None,
                    final_mapping_rate: final_rate,
                })
            }
            Ok(run) => {
                if run.exit_code.is_some_and(|c| self.config.oom_exit_codes.contains(&c)) {
                    Err(ExecError::OutOfMemory {
                        seconds: run.wall_seconds,
                    })
                } else {
                    Err(ExecError::Failed {
                        code: run.exit_code,
                        seconds: run.wall_seconds,
                    })
                }
            }
            Err(ExecError::KilledByPolicy { seconds }) => {
                ctx.kill.clear_policy();
                match decision {
                    Some(d) => Ok(StageOutcome {
                        seconds,
                        final_mapping_rate: d.observed_rate,
                        early_stop: Some(d),
                    }),
                    None => Err(ExecError::KilledByPolicy { seconds }),
                }
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use approx::assert_relative_eq;

    #[test]
    fn constant_noiseless_trajectory() {
        let spec = TrajectorySpec::new(0.9, 100.0, 1000, 7).with_noise(0.0);
        let samples = synth_progress(&spec, 1.0);
        assert_eq!(samples.len(), 10);
        let reads: Vec<u64> = samples.iter().map(|s| s.reads_processed).collect();
        assert_eq!(reads, (1..=10).map(|k| k * 100).collect::<Vec<_>>());
        for s in &samples {
            assert_relative_eq!(mapping_rate(s), 0.9, epsilon = 1e-12);
        }
    }

    #[test]
    fn trajectories_are_seeded() {
        let spec = TrajectorySpec::new(0.5, 37.0, 10_000, 42).with_noise(0.1);
        assert_eq!(synth_progress(&spec, 3.0), synth_progress(&spec, 3.0));
        let other = TrajectorySpec { seed: 43, ..spec };
        assert_ne!(synth_progress(&spec, 3.0), synth_progress(&other, 3.0));
        let samples = synth_progress(&spec, 3.0);
        assert_eq!(samples.last().unwrap().reads_processed, 10_000);
        for w in samples.windows(2) {
            assert!(w[0].reads_processed <= w[1].reads_processed);
        }
        for s in &samples {
            assert!(s.pct_unique_mapped + s.pct_multi_mapped <= 1.0 + 1e-12);
            assert!(s.pct_unique_mapped >= 0.0 && s.pct_multi_mapped >= 0.0);
        }
    }

    #[test]
    fn ramp_shape_moves_toward_final() {
        let mut spec = TrajectorySpec::new(0.9, 10.0, 100, 1).with_noise(0.0);
        spec.shape = TrajectoryShape::Ramp { start_rate: 0.1 };
        let s = synth_progress(&spec, 1.0);
        assert!(mapping_rate(&s[0]) < mapping_rate(s.last().unwrap()));
        assert_relative_eq!(mapping_rate(s.last().unwrap()), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn template_rendering() {
        let vars = BTreeMap::from([
            ("sra_id", "SRR1".to_string()),
            ("threads", "8".to_string()),
        ]);
        assert_eq!(
            render_command("star --threads {threads} {sra_id}", &vars).unwrap(),
            "star --threads 8 SRR1"
        );
        assert!(render_command("x {nope}", &vars).is_err());
        assert!(render_command("x {sra_id", &vars).is_err());
        assert!(render_command("x }", &vars).is_err());
    }

    #[test]
    fn noop_command_exits_zero() {
        let dir = tempfile::tempdir().unwrap();
        let run = exec_stage("true", dir.path(), None, &ExecLimits::default(), &KillSwitch::new(), |_| {})
            .unwrap();
        assert!(run.success);
        assert_eq!(run.exit_code, Some(0));
        let run = exec_stage("exit 3", dir.path(), None, &ExecLimits::default(), &KillSwitch::new(), |_| {})
            .unwrap();
        assert_eq!(run.exit_code, Some(3));
    }

    #[test]
    fn sleeping_past_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let limits = ExecLimits {
            timeout_seconds: Some(0.3),
            grace_seconds: 1.0,
            poll_seconds: 0.02,
        };
        let err = exec_stage("sleep 30", dir.path(), None, &limits, &KillSwitch::new(), |_| {}).unwrap_err();
        assert!(matches!(err, ExecError::Timeout { seconds } if seconds < 5.0));
    }

    #[test]
    fn kill_hook_from_another_thread() {
        let dir = tempfile::tempdir().unwrap();
        let kill = KillSwitch::new();
        let remote = kill.clone();
        let t = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(200));
            remote.fire(KillReason::Policy);
        });
        let limits = ExecLimits {
            poll_seconds: 0.02,
            ..ExecLimits::default()
        };
        let err = exec_stage("sleep 30", dir.path(), None, &limits, &kill, |_| {}).unwrap_err();
        t.join().unwrap();
        match err {
            ExecError::KilledByPolicy { seconds } => assert!(seconds > 0.1 && seconds < 5.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn grace_period_escalates_to_sigkill() {
        let dir = tempfile::tempdir().unwrap();
        let kill = KillSwitch::new();
        kill.fire(KillReason::Interruption);
        let limits = ExecLimits {
            grace_seconds: 0.3,
            poll_seconds: 0.02,
            timeout_seconds: None,
        };
        let start = Instant::now();
        let err = exec_stage("trap '' TERM; sleep 30", dir.path(), None, &limits, &kill, |_| {}).unwrap_err();
        assert!(matches!(err, ExecError::Interrupted { .. }));
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn spawn_failure_in_missing_workdir() {
        let err = exec_stage(
            "true",
            Path::new("/nonexistent/dir/for/test"),
            None,
            &ExecLimits::default(),
            &KillSwitch::new(),
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, ExecError::SpawnFailure { .. }));
    }

    fn ctx_run(exec: &SyntheticExecutor, task: &TaskSpec, policy: &EarlyStopPolicy) -> (Result<StageOutcome, ExecError>, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let kill = KillSwitch::new();
        let clock = ManualClock::new(0.0);
        let mut hb = || {};
        let mut ctx = StageContext {
            task,
            workdir: dir.path(),
            index_dir: dir.path(),
            threads: 8,
            policy,
            kill: &kill,
            clock: &clock,
            heartbeat: &mut hb,
        };
        (exec.run_stage(Stage::Align, &mut ctx), dir)
    }

    #[test]
    fn synthetic_align_kill_latency_within_one_poll() {
        let exec = SyntheticExecutor::new(SyntheticConfig {
            noise_std: 0.0,
            progress_interval_seconds: 7.0,
            ..SyntheticConfig::default()
        });
        let task = TaskSpec::new("low", 2_000_000_000)
            .with_reads(25_000_000)
            .with_mapping_rate(0.1);
        let policy = EarlyStopPolicy::default();
        let (out, dir) = ctx_run(&exec, &task, &policy);
        let out = out.unwrap();
        let decision = out.early_stop.expect("terminated");
        let full = exec.align_seconds(&task);
        // first sample at or past 10% of reads
        let spec = exec.trajectory(&task);
        let samples = synth_progress(&spec, 7.0);
        let trigger = samples
            .iter()
            .find(|s| s.reads_processed as f64 / 25e6 >= 0.1)
            .unwrap();
        assert!(out.seconds >= trigger.elapsed_seconds);
        assert!(out.seconds - trigger.elapsed_seconds <= policy.poll_interval_seconds);
        assert!(out.seconds < 0.2 * full);
        assert!(decision.processed_fraction.unwrap() >= 0.1);
        // the progress file uses the canonical layout
        let text = fs::read_to_string(dir.path().join(PROGRESS_FILE)).unwrap();
        let parsed = crate::progress::parse_progress_log(&text, &ColumnMap::default());
        assert!(!parsed.is_empty());
    }

    #[test]
    fn synthetic_align_healthy_runs_full() {
        let exec = SyntheticExecutor::new(SyntheticConfig::default());
        let task = TaskSpec::new("ok", 2_000_000_000).with_reads(25_000_000);
        let (out, _dir) = ctx_run(&exec, &task, &EarlyStopPolicy::default());
        let out = out.unwrap();
        assert!(out.early_stop.is_none());
        assert_relative_eq!(out.seconds, exec.align_seconds(&task));
        assert!((out.final_mapping_rate.unwrap() - 0.9).abs() < 0.1);
    }

    #[test]
    fn kill_switch_precedence() {
        let k = KillSwitch::new();
        assert_eq!(k.reason(), None);
        k.fire(KillReason::Policy);
        assert_eq!(k.reason(), Some(KillReason::Policy));
        k.fire(KillReason::Interruption);
        k.fire(KillReason::Policy);
        assert!(k.interrupted());
        k.clear_policy();
        assert!(k.interrupted());
    }
}
