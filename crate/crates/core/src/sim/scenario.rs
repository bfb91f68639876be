use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{InjectedFailure, SyntheticConfig};
use crate::manifest::{AdmissionRange, Manifest, ManifestError, TaskSpec};
use crate::perf::{InstanceType, SizeClassScaling};
use crate::progress::EarlyStopPolicy;
use crate::worker::{ResourceEnvelope, Stage};

use super::workload::SyntheticWorkload;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("scenario manifest: {0}")]
    Manifest(#[from] ManifestError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub name: String,
    pub vcpus: u32,
    pub physical_cores: u32,
    pub ram_gib: f64,
    pub price_per_hour: f64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        let r7a = InstanceType::r7a_2xlarge();
        Self {
            name: r7a.name,
            vcpus: r7a.vcpus,
            physical_cores: r7a.physical_cores,
            ram_gib: r7a.ram_gib,
            price_per_hour: r7a.on_demand_price_per_hour,
        }
    }
}

impl InstanceSpec {
    pub fn instance_type(&self) -> InstanceType {
        InstanceType::new(
            self.name.clone(),
            self.vcpus,
            self.physical_cores,
            self.ram_gib,
            self.price_per_hour,
        )
    }
}

/// A scripted interruption: the instance occupying `slot` at time `at`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledInterruption {
    pub slot: u32,
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterruptionModel {
    #[default]
    None,
    Poisson {
        rate_per_instance_hour: f64,
    },
    Trace {
        events: Vec<ScheduledInterruption>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pricing {
    pub spot_discount: f64,
    pub storage_price_gb_month: f64,
    pub transfer_price_per_gb: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        Self {
            spot_discount: 0.55,
            storage_price_gb_month: 0.08,
            transfer_price_per_gb: 0.01,
        }
    }
}

/// Durations of everything except the scaling model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTimeModel {
    pub threads: u32,
    pub align_bytes_per_thread_second: f64,
    pub prefetch_bytes_per_second: f64,
    pub convert_bytes_per_second: f64,
    pub sort_normalize_fraction: f64,
    pub upload_seconds: f64,
    pub fastq_expansion_default: f64,
    pub bytes_per_read: f64,
    /// Cadence of modeled progress-log lines.
    pub progress_interval_seconds: f64,
    pub noise_std: f64,
    pub default_mapping_rate: f64,
}

impl Default for StageTimeModel {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            threads: s.threads,
            align_bytes_per_thread_second: s.align_bytes_per_thread_second,
            prefetch_bytes_per_second: s.prefetch_bytes_per_second,
            convert_bytes_per_second: s.convert_bytes_per_second,
            sort_normalize_fraction: s.sort_normalize_fraction,
            upload_seconds: s.upload_seconds,
            fastq_expansion_default: s.fastq_expansion_default,
            bytes_per_read: s.bytes_per_read,
            progress_interval_seconds: s.progress_interval_seconds,
            noise_std: s.noise_std,
            default_mapping_rate: s.default_mapping_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSource {
    /// Manifest CSV; relative paths resolve against the scenario file.
    Manifest { path: PathBuf },
    Synthetic(SyntheticWorkload),
}

impl Default for WorkloadSource {
    fn default() -> Self {
        WorkloadSource::Synthetic(SyntheticWorkload::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub name: String,
    pub seed: u64,
    pub fleet_size: u32,
    pub instance: InstanceSpec,
    pub interruption: InterruptionModel,
    pub index_size_gib: f64,
    /// Aggregate bandwidth of the index server.
    pub server_bandwidth_gib_s: f64,
    /// Per-worker cap; unset means only the server limits.
    pub per_worker_bandwidth_gib_s: Option<f64>,
    /// Delay before a replacement for an interrupted instance starts.
    pub provisioning_delay_seconds: f64,
    /// Initial instances start uniformly over `[0, start_stagger_seconds]`.
    pub start_stagger_seconds: f64,
    pub pricing: Pricing,
    pub policy: EarlyStopPolicy,
    pub scaling: SizeClassScaling,
    pub stage_time_model: StageTimeModel,
    pub envelope: ResourceEnvelope,
    pub retry_limit: u32,
    /// Chance that an attempt runs out of memory during SortNormalize.
    pub failure_probability: f64,
    /// Tasks that fail at the given stage on every attempt.
    pub forced_failures: BTreeMap<String, (Stage, InjectedFailure)>,
    pub timeline_bucket_seconds: f64,
    pub workload: WorkloadSource,
    /// Resolved task list; takes precedence over `workload`.
    #[serde(skip)]
    pub tasks: Option<Vec<TaskSpec>>,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            name: "scenario".into(),
            seed: 0,
            fleet_size: 1,
            instance: InstanceSpec::default(),
            interruption: InterruptionModel::None,
            index_size_gib: 29.5,
            server_bandwidth_gib_s: 1.756,
            per_worker_bandwidth_gib_s: None,
            provisioning_delay_seconds: 180.0,
            start_stagger_seconds: 300.0,
            pricing: Pricing::default(),
            policy: EarlyStopPolicy::default(),
            scaling: SizeClassScaling::default(),
            stage_time_model: StageTimeModel::default(),
            envelope: ResourceEnvelope::default(),
            retry_limit: 3,
            failure_probability: 0.0,
            forced_failures: BTreeMap::new(),
            timeline_bucket_seconds: 600.0,
            workload: WorkloadSource::default(),
            tasks: None,
        }
    }
}

impl SimScenario {
    /// Scenario over an explicit task list.
    pub fn with_tasks(tasks: Vec<TaskSpec>) -> Self {
        Self {
            tasks: Some(tasks),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let mut scenario: SimScenario = toml::from_str(text)?;
        if let WorkloadSource::Manifest { path } = &scenario.workload {
            let path = if path.is_relative() {
                base_dir.join(path)
            } else {
                path.clone()
            };
            let manifest = Manifest::load(&path, AdmissionRange::default())?;
            scenario.tasks = Some(manifest.tasks);
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let non_negative = |v: f64| v >= 0.0 && v.is_finite();
        if self.fleet_size < 1 {
            return Err(invalid("fleet_size must be at least 1"));
        }
        if !positive(self.index_size_gib) {
            return Err(invalid("index_size_gib must be positive"));
        }
        if !positive(self.server_bandwidth_gib_s) {
            return Err(invalid("server_bandwidth_gib_s must be positive"));
        }
        if let Some(cap) = self.per_worker_bandwidth_gib_s {
            if !positive(cap) {
                return Err(invalid("per_worker_bandwidth_gib_s must be positive"));
            }
        }
        if !non_negative(self.provisioning_delay_seconds) || !non_negative(self.start_stagger_seconds) {
            return Err(invalid("delays must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.pricing.spot_discount)
            || !non_negative(self.pricing.storage_price_gb_month)
            || !non_negative(self.pricing.transfer_price_per_gb)
        {
            return Err(invalid("pricing out of range"));
        }
        self.instance
            .instance_type()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.policy.validate().map_err(|e| invalid(e.to_string()))?;
        self.scaling.small.validate().map_err(|e| invalid(e.to_string()))?;
        self.scaling.large.validate().map_err(|e| invalid(e.to_string()))?;
        self.envelope.validate().map_err(invalid)?;
        let st = &self.stage_time_model;
        if st.threads == 0
            || ![
                st.align_bytes_per_thread_second,
                st.prefetch_bytes_per_second,
                st.convert_bytes_per_second,
                st.fastq_expansion_default,
                st.bytes_per_read,
                st.progress_interval_seconds,
            ]
            .into_iter()
            .all(positive)
            || !non_negative(st.sort_normalize_fraction)
            || !non_negative(st.upload_seconds)
            || !non_negative(st.noise_std)
        {
            return Err(invalid("stage_time_model values must be positive"));
        }
        if !(0.0..=1.0).contains(&self.failure_probability) {
            return Err(invalid("failure_probability must be in [0, 1]"));
        }
        if !positive(self.timeline_bucket_seconds) {
            return Err(invalid("timeline_bucket_seconds must be positive"));
        }
        match &self.interruption {
            InterruptionModel::None => {}
            InterruptionModel::Poisson { rate_per_instance_hour } => {
                if !non_negative(*rate_per_instance_hour) {
                    return Err(invalid("interruption rate must be non-negative"));
                }
            }
            InterruptionModel::Trace { events } => {
                for ev in events {
                    if ev.slot >= self.fleet_size {
                        return Err(invalid(format!(
                            "interruption slot {} outside fleet of {}",
                            ev.slot, self.fleet_size
                        )));
                    }
                    if !non_negative(ev.at) {
                        return Err(invalid("interruption times must be non-negative"));
                    }
                }
            }
        }
        if let WorkloadSource::Synthetic(w) = &self.workload {
            w.validate().map_err(invalid)?;
        }
        if let Some(tasks) = &self.tasks {
            let mut seen = std::collections::HashSet::new();
            for t in tasks {
                if !seen.insert(t.sra_id.as_str()) {
                    return Err(invalid(format!("duplicate task id {:?}", t.sra_id)));
                }
            }
        }
        Ok(())
    }

    /// The task list: explicit tasks, else the synthetic generator.
    pub fn resolve_tasks(&self) -> Result<Vec<TaskSpec>, ScenarioError> {
        if let Some(tasks) = &self.tasks {
            return Ok(tasks.clone());
        }
        match &self.workload {
            WorkloadSource::Synthetic(w) => Ok(w.generate(self.seed)),
            WorkloadSource::Manifest { path } => {
                Ok(Manifest::load(path, AdmissionRange::default())?.tasks)
            }
        }
    }

    /// Stage model for the synthetic executor used inside the simulation.
    pub fn synthetic_config(&self) -> SyntheticConfig {
        let st = &self.stage_time_model;
        SyntheticConfig {
            scaling: self.scaling.clone(),
            threads: st.threads,
            align_bytes_per_thread_second: st.align_bytes_per_thread_second,
            prefetch_bytes_per_second: st.prefetch_bytes_per_second,
            convert_bytes_per_second: st.convert_bytes_per_second,
            sort_normalize_fraction: st.sort_normalize_fraction,
            upload_seconds: st.upload_seconds,
            fastq_expansion_default: st.fastq_expansion_default,
            default_mapping_rate: st.default_mapping_rate,
            noise_std: st.noise_std,
            bytes_per_read: st.bytes_per_read,
            progress_interval_seconds: st.progress_interval_seconds,
            seed: self.seed,
            failures: self.forced_failures.clone(),
            ..SyntheticConfig::default()
        }
    }
}
