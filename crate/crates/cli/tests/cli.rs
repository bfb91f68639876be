use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alignfleet_core::sim::{emit_timeline, read_timeline_csv, FleetTrace};
use alignfleet_core::sweep::read_sweep_csv;
use approx::assert_relative_eq;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel)
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn cli<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_alignfleet")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(["run", "--manifest", "no/such.csv", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no/such.csv"), "{}", stderr(&out));
}

#[test]
fn malformed_pricing_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("p.csv");
    fs::write(&bad, "name,vcpus,cores,ram_gib,price_per_hour,total_hours\nx,8,4,64,cheap,1\n").unwrap();
    let out = cli(["analyze", "instances", "--pricing", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn empty_scaling_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("s.csv");
    fs::write(&empty, "threads,speedup\n").unwrap();
    let out = cli(["analyze", "scaling", "--points", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("insufficient data"), "{}", stderr(&out));
}

#[test]
fn bad_scenario_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    fs::write(&path, "fleet_size = 2\nfleet_sise = 3\n").unwrap();
    let out = cli(["simulate", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scaling_writes_curve_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli([
        "analyze",
        "scaling",
        "--points",
        fixture("scaling/efficiency_points.csv").to_str().unwrap(),
        "--fixed-price",
        "0.3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let threads: u32 = r[3].parse().unwrap();
        assert!((1..=32).contains(&threads));
    }
    assert!(dir.path().join("efficiency_curve.csv").exists());
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("scaling.json")).unwrap()).unwrap();
    assert!(json.is_object() || json.is_array());
}

#[test]
fn random_sweep_is_seeded() {
    let args = ["sweep-threshold", "--random", "30", "--seed", "5", "--thresholds", "0,0.5,0.9"];
    let a = cli(args);
    let b = cli(args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let rows = read_sweep_csv(a.stdout.as_slice()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[1].total_align_time <= w[0].total_align_time));
}

#[test]
fn sweep_out_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("sweep.csv");
    let traj = fixture("trajectories/unit_100.csv");
    let stdout = cli(["sweep-threshold", "--trajectories", traj.to_str().unwrap()]);
    let to_file = cli([
        "sweep-threshold",
        "--trajectories",
        traj.to_str().unwrap(),
        "--out",
        file.to_str().unwrap(),
    ]);
    assert!(to_file.status.success());
    assert_eq!(fs::read(&file).unwrap(), stdout.stdout);
    let rows = read_sweep_csv(stdout.stdout.as_slice()).unwrap();
    assert_eq!(rows.len(), 11);
    assert_relative_eq!(rows[0].total_align_time, 100.0, max_relative = 1e-12);
}

#[test]
fn simulate_outputs_agree_with_timeline_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli([
        "simulate",
        "--config",
        scenario("spot_1000.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.code().is_some_and(|c| c <= 1), "{}", stderr(&out));

    let trace = FleetTrace::read_csv(fs::File::open(dir.path().join("trace.csv")).unwrap()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["files_completed"].as_u64().unwrap() + summary["files_failed"].as_u64().unwrap(), 1000);

    let report = dir.path().join("tl.csv");
    let r = cli([
        "report",
        "timeline",
        "--trace",
        dir.path().join("trace.csv").to_str().unwrap(),
        "--bucket",
        "900",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let rows = read_timeline_csv(fs::File::open(&report).unwrap()).unwrap();
    assert_eq!(rows, emit_timeline(&trace, 900.0));
    assert_eq!(rows.last().unwrap().cumulative_completed, summary["files_completed"].as_u64().unwrap());
}

#[test]
fn run_with_subprocess_executor() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        r#"
executor = "subprocess"
workers = 2

[subprocess.commands]
prefetch = "true"
convert = "true"
align = "echo done > Log.final.out"
sort_normalize = "true"
upload = "true"
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = cli([
        "run",
        "--manifest",
        fixture("manifests/sample10.csv").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(summary["completed_total"], 10);
    assert!(out_dir.join("workers/worker-0.json").exists());
}

#[test]
fn unknown_run_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "wrokers = 2\n").unwrap();
    let out = cli([
        "run",
        "--manifest",
        fixture("manifests/sample10.csv").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
