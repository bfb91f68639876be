//! Early-stop threshold sweeps over a set of alignment trajectories.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::executor::{synth_progress, TrajectorySpec};
use crate::progress::{supervise, EarlyStopPolicy, ProgressSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub total_align_time: f64,
    pub terminated_count: usize,
}

/// A trajectory with its progress samples materialized once.
#[derive(Debug, Clone)]
pub struct SampledTrajectory {
    pub duration_seconds: f64,
    pub total_reads: u64,
    pub samples: Vec<ProgressSample>,
}

impl SampledTrajectory {
    pub fn new(spec: &TrajectorySpec, sample_interval_seconds: f64) -> Self {
        Self {
            duration_seconds: spec.duration_seconds(),
            total_reads: spec.total_reads,
            samples: synth_progress(spec, sample_interval_seconds),
        }
    }

    /// Align seconds consumed under `policy`.
    pub fn consumed_seconds(&self, policy: &EarlyStopPolicy) -> (f64, bool) {
        let out = supervise(&self.samples, policy, Some(self.total_reads));
        (
            self.duration_seconds * out.consumed_fraction,
            out.decision.is_terminate(),
        )
    }
}

/// One row per threshold: total align time over all trajectories and how many
/// were stopped early.
pub fn sweep_thresholds(
    trajectories: &[SampledTrajectory],
    thresholds: &[f64],
    min_processed_fraction: f64,
) -> Vec<SweepRow> {
    thresholds
        .iter()
        .map(|&threshold| {
            let policy = EarlyStopPolicy {
                threshold,
                min_processed_fraction,
                ..EarlyStopPolicy::default()
            };
            let (total, terminated) = trajectories.iter().fold((0.0, 0), |(t, n), tr| {
                let (secs, stopped) = tr.consumed_seconds(&policy);
                (t + secs, n + usize::from(stopped))
            });
            SweepRow {
                threshold,
                total_align_time: total,
                terminated_count: terminated,
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    id: String,
    final_mapping_rate: f64,
    read_speed: f64,
    total_reads: u64,
    #[serde(default)]
    noise_std: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

/// Reads `id,final_mapping_rate,read_speed,total_reads[,noise_std,seed]`.
pub fn read_trajectories<R: Read>(reader: R) -> Result<Vec<TrajectorySpec>, csv::Error> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize::<TrajectoryRow>()
        .enumerate()
        .map(|(i, row)| {
            let row = row?;
            let mut spec = TrajectorySpec::new(
                row.final_mapping_rate,
                row.read_speed,
                row.total_reads,
                row.seed.unwrap_or(i as u64),
            );
            spec.noise_std = row.noise_std.unwrap_or(0.0);
            Ok(spec)
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(reader: R) -> Result<Vec<SweepRow>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

/// Random trajectory set: rates uniform in `[0, 1]`, read counts and speeds
/// spread over an order of magnitude.
pub fn random_trajectories(count: usize, seed: u64) -> Vec<TrajectorySpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let rate: f64 = rng.random_range(0.0..=1.0);
            let reads = rng.random_range(1_000_000u64..50_000_000);
            let speed = rng.random_range(20_000.0..200_000.0);
            let noise = rng.random_range(0.0..0.05);
            TrajectorySpec::new(rate, speed, reads, seed.wrapping_mul(1_000_003) + i as u64).with_noise(noise)
        })
        .collect()
}
