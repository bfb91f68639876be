//! `alignfleet`: run the pipeline locally, simulate fleets, sweep early-stop
//! thresholds and analyze instance/scaling data.
//!
//! Exit codes: 0 success, 1 some tasks failed, 2 usage or configuration error.

mod run;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alignfleet_core::perf::{
    fit_parallel_fraction, read_pricing_csv, read_scaling_points, rank_instances, recommend_threads,
    ThreadCostInputs,
};
use alignfleet_core::sim::{
    emit_timeline, simulate, write_timeline_csv, FleetTrace, SimScenario,
};
use alignfleet_core::sweep::{read_trajectories, random_trajectories, sweep_thresholds, write_sweep_csv, SampledTrajectory};
use alignfleet_core::{InstanceType, ScalingModel};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "alignfleet", version, about = "Batch alignment pipeline engine and spot-fleet simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a manifest with local workers.
    Run(RunArgs),
    /// Simulate a fleet from a scenario file.
    Simulate(SimulateArgs),
    /// Total align time for each early-stop threshold.
    SweepThreshold(SweepArgs),
    /// Instance-type ranking and thread-scaling fits.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Report data derived from simulation traces.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    Synthetic,
    Subprocess,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub executor: Option<ExecutorKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_fraction: Option<f64>,
    /// Split into small/large queues at this compressed size.
    #[arg(long)]
    pub size_threshold_bytes: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the fleet size.
    #[arg(long)]
    workers: Option<u32>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_fraction: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Trajectory CSV: id,final_mapping_rate,read_speed,total_reads[,noise_std,seed].
    #[arg(long, conflicts_with = "random")]
    trajectories: Option<PathBuf>,
    /// Generate this many random trajectories instead.
    #[arg(long)]
    random: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated thresholds; defaults to 0.0, 0.1, ..., 1.0.
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0.10)]
    min_fraction: f64,
    /// Progress samples per trajectory.
    #[arg(long, default_value_t = 20)]
    samples: u32,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Rank instance types by total cost.
    Instances {
        /// Pricing CSV: name,vcpus,cores,ram_gib,price_per_hour,total_hours.
        #[arg(long)]
        pricing: PathBuf,
    },
    /// Fit the parallel fraction and recommend a thread count.
    Scaling {
        /// CSV with threads and speedup or efficiency, optional class column.
        #[arg(long)]
        points: PathBuf,
        #[arg(long, default_value_t = 32)]
        max_threads: u32,
        /// Defaults to the r7a.2xlarge hourly price per vCPU.
        #[arg(long)]
        per_vcpu_price: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        fixed_price: f64,
        /// Share of single-thread time outside alignment.
        #[arg(long, default_value_t = 0.29)]
        non_align_fraction: f64,
        /// Directory for efficiency_curve.csv and scaling.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Running instances and completed files per time bucket.
    Timeline {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 600.0)]
        bucket: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ALIGNFLEET_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run::cmd_run(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::SweepThreshold(args) => cmd_sweep(&args).map(|_| 0),
        Command::Analyze(cmd) => cmd_analyze(cmd).map(|_| 0),
        Command::Report(ReportCommand::Timeline { trace, bucket, out }) => {
            cmd_timeline(&trace, bucket, out.as_deref()).map(|_| 0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if !msg.contains(&s) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&s);
        }
    }
    msg
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8> {
    let mut scenario = SimScenario::load(&args.config)
        .with_context(|| format!("loading scenario {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(n) = args.workers {
        scenario.fleet_size = n;
    }
    if let Some(t) = args.threshold {
        scenario.policy.threshold = t;
    }
    if let Some(m) = args.min_fraction {
        scenario.policy.min_processed_fraction = m;
    }
    let (trace, summary) = simulate(&scenario)?;
    std::fs::create_dir_all(&args.out)?;
    trace.write_csv(File::create(args.out.join("trace.csv"))?)?;
    let rows = emit_timeline(&trace, scenario.timeline_bucket_seconds);
    write_timeline_csv(File::create(args.out.join("timeline.csv"))?, &rows)?;
    serde_json::to_writer_pretty(File::create(args.out.join("summary.json"))?, &summary)?;
    println!(
        "{}: {} completed, {} failed, {} stopped early, {} interruptions, {:.2} node-hours, \
         wasted {:.2}%, cost ${:.2} (${:.4}/file)",
        scenario.name,
        summary.files_completed,
        summary.files_failed,
        summary.early_stopped,
        summary.interruptions,
        summary.node_hours,
        100.0 * summary.wasted_fraction,
        summary.cost.total,
        summary.cost.per_file,
    );
    Ok(if summary.files_failed > 0 { 1 } else { 0 })
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let specs = match (&args.trajectories, args.random) {
        (Some(path), _) => read_trajectories(open(path)?)?,
        (None, Some(n)) => random_trajectories(n, args.seed),
        (None, None) => bail!("pass --trajectories or --random"),
    };
    if specs.is_empty() {
        bail!("trajectory set is empty");
    }
    if args.samples == 0 {
        bail!("--samples must be positive");
    }
    if specs.iter().any(|s| !(s.read_speed_reads_per_second > 0.0) || s.total_reads == 0) {
        bail!("trajectories need positive read speed and read count");
    }
    let thresholds = if args.thresholds.is_empty() {
        (0..=10).map(|i| f64::from(i) / 10.0).collect()
    } else {
        args.thresholds.clone()
    };
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        bail!("thresholds must be in [0, 1]");
    }
    if !(args.min_fraction > 0.0 && args.min_fraction <= 1.0) {
        bail!("--min-fraction must be in (0, 1]");
    }
    let sampled: Vec<_> = specs
        .iter()
        .map(|s| SampledTrajectory::new(s, s.duration_seconds() / f64::from(args.samples)))
        .collect();
    let rows = sweep_thresholds(&sampled, &thresholds, args.min_fraction);
    write_sweep_csv(output(args.out.as_deref())?, &rows)?;
    Ok(())
}

fn cmd_analyze(cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Instances { pricing } => {
            let rows = read_pricing_csv(open(&pricing)?)?;
            let mut with_hours = Vec::with_capacity(rows.len());
            for (instance, hours) in rows {
                let Some(hours) = hours else {
                    bail!("{}: total_hours column is required for ranking", instance.name);
                };
                with_hours.push((instance, hours));
            }
            let ranked = rank_instances(&with_hours)?;
            let mut out = csv_stdout();
            out.write_record(["rank", "instance", "vcpus", "cores", "price_per_hour", "total_hours", "total_cost"])?;
            for r in ranked {
                out.write_record([
                    r.rank.to_string(),
                    r.instance.name.clone(),
                    r.instance.vcpus.to_string(),
                    r.instance.physical_cores.to_string(),
                    format!("{:.4}", r.instance.on_demand_price_per_hour),
                    format!("{:.2}", r.total_hours),
                    format!("{:.2}", r.total_cost),
                ])?;
            }
            out.flush()?;
        }
        AnalyzeCommand::Scaling {
            points,
            max_threads,
            per_vcpu_price,
            fixed_price,
            non_align_fraction,
            out,
        } => {
            let groups = read_scaling_points(open(&points)?)?;
            if groups.is_empty() {
                return Err(alignfleet_core::perf::PerfError::InsufficientData.into());
            }
            let r7a = InstanceType::r7a_2xlarge();
            let inputs = ThreadCostInputs {
                per_vcpu_price: per_vcpu_price.unwrap_or(r7a.price_per_vcpu_hour()),
                fixed_overhead_price: fixed_price,
                non_align_fraction,
                max_threads,
            };
            let mut report = serde_json::Map::new();
            let mut curve_rows = Vec::new();
            let mut stdout = csv_stdout();
            stdout.write_record(["class", "parallel_fraction", "efficiency_at_16", "recommended_threads"])?;
            for (class, pts) in &groups {
                let p = fit_parallel_fraction(pts).with_context(|| format!("class {class}"))?;
                let model = ScalingModel::amdahl(p);
                let rec = recommend_threads(&model, &inputs)?;
                for t in 1..=max_threads {
                    let tf = f64::from(t);
                    curve_rows.push((class.clone(), t, model.speedup(tf)?, model.efficiency(tf)?));
                }
                stdout.write_record([
                    class.clone(),
                    format!("{p:.6}"),
                    format!("{:.4}", model.efficiency(16.0)?),
                    rec.threads.to_string(),
                ])?;
                report.insert(
                    class.clone(),
                    serde_json::json!({ "parallel_fraction": p, "points": pts, "recommendation": rec }),
                );
            }
            stdout.flush()?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let mut w = csv::Writer::from_path(dir.join("efficiency_curve.csv"))?;
                w.write_record(["class", "threads", "speedup", "efficiency"])?;
                for (class, t, s, e) in curve_rows {
                    w.write_record([class, t.to_string(), s.to_string(), e.to_string()])?;
                }
                w.flush()?;
                serde_json::to_writer_pretty(File::create(dir.join("scaling.json"))?, &report)?;
            }
        }
    }
    Ok(())
}

fn csv_stdout() -> csv::Writer<io::StdoutLock<'static>> {
    csv::Writer::from_writer(io::stdout().lock())
}

fn cmd_timeline(trace: &Path, bucket: f64, out: Option<&Path>) -> Result<()> {
    if !(bucket > 0.0) {
        bail!("--bucket must be positive");
    }
    let trace = FleetTrace::read_csv(open(trace)?)?;
    write_timeline_csv(output(out)?, &emit_timeline(&trace, bucket))?;
    Ok(())
}
