use std::fs::{self, File};
use std::path::{Path, PathBuf};

use alignfleet_core::executor::{SubprocessConfig, SubprocessExecutor};
use alignfleet_core::manifest::AdmissionRange;
use alignfleet_core::{
    EarlyStopPolicy, Executor, Ledger, Manifest, QueueSet, RecordStatus, ResourceEnvelope,
    SyntheticConfig, SyntheticExecutor, SystemClock, Worker, WorkerConfig, WorkerReport,
};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::{ExecutorKind, RunArgs};

/// `run` configuration file. Command-line flags override these values.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    executor: ExecutorKind,
    workers: usize,
    seed: u64,
    retry_limit: u32,
    threads: u32,
    size_threshold_bytes: Option<u64>,
    index_dir: PathBuf,
    keep_workdirs: bool,
    admission: AdmissionRange,
    early_stop: EarlyStopPolicy,
    envelope: ResourceEnvelope,
    synthetic: SyntheticConfig,
    subprocess: Option<SubprocessConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            executor: ExecutorKind::Synthetic,
            workers: 4,
            seed: 0,
            retry_limit: 3,
            threads: 8,
            size_threshold_bytes: None,
            index_dir: PathBuf::from("index"),
            keep_workdirs: false,
            admission: AdmissionRange::default(),
            early_stop: EarlyStopPolicy::default(),
            envelope: ResourceEnvelope::default(),
            synthetic: SyntheticConfig::default(),
            subprocess: None,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunSummary {
    manifest_tasks: usize,
    rejected_by_size: usize,
    enqueued: usize,
    already_completed: usize,
    already_failed: usize,
    already_queued: usize,
    processed: u64,
    completed: u64,
    terminated_early: u64,
    failed: u64,
    completed_total: usize,
    failed_total: usize,
    workers: usize,
    totals: WorkerReport,
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(e) = args.executor {
        cfg.executor = e;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threshold {
        cfg.early_stop.threshold = t;
    }
    if let Some(m) = args.min_fraction {
        cfg.early_stop.min_processed_fraction = m;
    }
    if args.size_threshold_bytes.is_some() {
        cfg.size_threshold_bytes = args.size_threshold_bytes;
    }
    if cfg.workers == 0 {
        bail!("workers must be at least 1");
    }
    cfg.early_stop.validate()?;
    cfg.envelope.validate().map_err(anyhow::Error::msg)?;
    Ok(cfg)
}

fn build_executor(cfg: &RunConfig) -> Result<Box<dyn Executor>> {
    Ok(match cfg.executor {
        ExecutorKind::Synthetic => Box::new(SyntheticExecutor::new(SyntheticConfig {
            seed: cfg.seed,
            threads: cfg.threads,
            ..cfg.synthetic.clone()
        })),
        ExecutorKind::Subprocess => {
            let Some(sub) = cfg.subprocess.clone() else {
                bail!("subprocess executor needs a [subprocess] section with stage commands");
            };
            Box::new(SubprocessExecutor::new(sub, cfg.index_dir.clone(), cfg.threads))
        }
    })
}

pub fn cmd_run(args: &RunArgs) -> Result<u8> {
    let cfg = load_config(args)?;
    let manifest = Manifest::load(&args.manifest, cfg.admission)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    for (task, why) in &manifest.rejected {
        log::warn!("{} rejected: {why:?}", task.sra_id);
    }
    let executor = build_executor(&cfg)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ledger = Ledger::open(&args.out.join("ledger.jsonl"))?;
    let queues = QueueSet::open(&args.out, cfg.size_threshold_bytes)?;

    let queued = queues.pending_ids();
    let (mut enqueued, mut done, mut dead, mut pending) = (0, 0, 0, 0);
    let now = alignfleet_core::Clock::now(&SystemClock);
    for task in &manifest.tasks {
        if ledger.already_processed(&task.sra_id) {
            done += 1;
        } else if ledger.status(&task.sra_id) == Some(RecordStatus::Failed)
            && ledger.failure_count(&task.sra_id) >= cfg.retry_limit
        {
            dead += 1;
        } else if queued.contains(&task.sra_id) {
            pending += 1;
        } else {
            queues.enqueue(task.clone(), now)?;
            enqueued += 1;
        }
    }
    log::info!("{enqueued} enqueued, {done} already completed, {pending} already queued");

    let workdir_root = args.out.join("work");
    let reports = run_workers(&cfg, &queues, &ledger, executor.as_ref(), &workdir_root)?;

    let report_dir = args.out.join("workers");
    fs::create_dir_all(&report_dir)?;
    let mut totals = WorkerReport::default();
    for r in &reports {
        serde_json::to_writer_pretty(File::create(report_dir.join(format!("{}.json", r.worker_id)))?, r)?;
        totals.merge(r);
    }
    let statuses = ledger.statuses();
    let summary = RunSummary {
        manifest_tasks: manifest.tasks.len(),
        rejected_by_size: manifest.rejected.len(),
        enqueued,
        already_completed: done,
        already_failed: dead,
        already_queued: pending,
        processed: totals.processed(),
        completed: totals.tasks_completed,
        terminated_early: totals.tasks_terminated_early,
        failed: totals.tasks_failed,
        completed_total: ledger.completed_count(),
        failed_total: statuses.values().filter(|s| **s == RecordStatus::Failed).count(),
        workers: reports.len(),
        totals,
    };
    serde_json::to_writer_pretty(File::create(args.out.join("summary.json"))?, &summary)?;
    println!(
        "processed {} ({} completed, {} stopped early, {} failed); {} completed overall",
        summary.processed, summary.completed, summary.terminated_early, summary.failed, summary.completed_total
    );
    Ok(if summary.failed > 0 { 1 } else { 0 })
}

fn run_workers(
    cfg: &RunConfig,
    queues: &QueueSet,
    ledger: &Ledger,
    executor: &dyn Executor,
    workdir_root: &Path,
) -> Result<Vec<WorkerReport>> {
    let clock = SystemClock;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|i| {
                let mut wc = WorkerConfig::new(format!("worker-{i}"), workdir_root);
                wc.retry_limit = cfg.retry_limit;
                wc.threads = cfg.threads;
                wc.index_dir = cfg.index_dir.clone();
                wc.keep_workdirs = cfg.keep_workdirs;
                let clock = &clock;
                scope.spawn(move || {
                    Worker::new(wc, queues, ledger, executor, cfg.early_stop, cfg.envelope.clone(), clock).run()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| anyhow::anyhow!("worker thread panicked"))?
                    .map_err(anyhow::Error::from)
            })
            .collect()
    })
}
