use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::manifest::{AdmissionRange, TaskSpec};

/// Mapping-rate distribution for one tissue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueProfile {
    pub name: String,
    pub mean_rate: f64,
    pub std_rate: f64,
    pub weight: f64,
}

impl TissueProfile {
    fn new(name: &str, mean_rate: f64, std_rate: f64, weight: f64) -> Self {
        Self {
            name: name.into(),
            mean_rate,
            std_rate,
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorkload {
    pub count: usize,
    pub id_prefix: String,
    pub median_size_bytes: f64,
    /// Log-space standard deviation of compressed sizes.
    pub size_sigma: f64,
    pub min_size_bytes: u64,
    pub max_size_bytes: u64,
    pub bytes_per_read: f64,
    /// Share of tasks whose read count is known up front.
    pub reads_known_fraction: f64,
    pub tissues: Vec<TissueProfile>,
    /// Share of tasks with a rate drawn uniformly below `low_quality_rate_max`.
    pub low_quality_fraction: f64,
    pub low_quality_rate_max: f64,
}

impl Default for SyntheticWorkload {
    fn default() -> Self {
        let range = AdmissionRange::default();
        Self {
            count: 100,
            id_prefix: "SRR".into(),
            median_size_bytes: 2.0e9,
            size_sigma: 0.8,
            min_size_bytes: range.min_bytes,
            max_size_bytes: range.max_bytes,
            bytes_per_read: 80.0,
            reads_known_fraction: 1.0,
            tissues: vec![
                TissueProfile::new("brain", 0.87, 0.04, 1.0),
                TissueProfile::new("liver", 0.80, 0.05, 1.0),
                TissueProfile::new("blood", 0.72, 0.06, 1.0),
                TissueProfile::new("muscle", 0.65, 0.06, 1.0),
                TissueProfile::new("testis", 0.57, 0.07, 1.0),
            ],
            low_quality_fraction: 0.1,
            low_quality_rate_max: 0.25,
        }
    }
}

impl SyntheticWorkload {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.median_size_bytes > 0.0) || !(self.size_sigma >= 0.0) {
            return Err("workload size distribution must be positive".into());
        }
        if self.min_size_bytes == 0 || self.min_size_bytes > self.max_size_bytes {
            return Err("workload size bounds are inconsistent".into());
        }
        if !(self.bytes_per_read > 0.0) {
            return Err("bytes_per_read must be positive".into());
        }
        for f in [self.reads_known_fraction, self.low_quality_fraction, self.low_quality_rate_max] {
            if !(0.0..=1.0).contains(&f) {
                return Err("workload fractions must be in [0, 1]".into());
            }
        }
        if self.tissues.is_empty() || self.tissues.iter().any(|t| !(t.weight > 0.0) || !(t.std_rate >= 0.0)) {
            return Err("workload needs tissues with positive weights".into());
        }
        Ok(())
    }

    pub fn generate(&self, seed: u64) -> Vec<TaskSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7a5c);
        let sizes = LogNormal::new(self.median_size_bytes.ln(), self.size_sigma).expect("validated sigma");
        let pick = WeightedIndex::new(self.tissues.iter().map(|t| t.weight)).expect("validated weights");
        let width = self.count.max(1).to_string().len().max(7);
        (0..self.count)
            .map(|i| {
                let size = sizes
                    .sample(&mut rng)
                    .clamp(self.min_size_bytes as f64, self.max_size_bytes as f64) as u64;
                let tissue = &self.tissues[pick.sample(&mut rng)];
                let rate = if rng.random::<f64>() < self.low_quality_fraction {
                    rng.random_range(0.0..=self.low_quality_rate_max)
                } else {
                    let n = Normal::new(tissue.mean_rate, tissue.std_rate).expect("validated std");
                    n.sample(&mut rng).clamp(0.0, 1.0)
                };
                let known = rng.random::<f64>() < self.reads_known_fraction;
                let mut task = TaskSpec::new(format!("{}{:0width$}", self.id_prefix, i + 1), size)
                    .with_tissue(tissue.name.clone())
                    .with_mapping_rate(rate);
                if known {
                    task = task.with_reads((size as f64 / self.bytes_per_read).max(1.0) as u64);
                }
                task
            })
            .collect()
    }
}
