//! Task manifests: the list of SRA accessions a run should process.
//!
//! CSV with header `sra_id,size_bytes,expected_reads,tissue`. An empty
//! `expected_reads` means unknown. Optional trailing columns
//! `mapping_rate`, `expansion` and `sort_memory_gib` carry per-task overrides.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub sra_id: String,
    pub compressed_size_bytes: u64,
    pub expected_total_reads: Option<u64>,
    pub tissue: String,
    /// FASTQ size / SRA size; `None` uses the envelope default.
    pub fastq_expansion_factor: Option<f64>,
    pub sort_memory_gib: Option<f64>,
    /// Known or synthesized final mapping rate, used by synthetic execution.
    #[serde(default)]
    pub final_mapping_rate: Option<f64>,
}

impl TaskSpec {
    pub fn new(sra_id: impl Into<String>, compressed_size_bytes: u64) -> Self {
        Self {
            sra_id: sra_id.into(),
            compressed_size_bytes,
            expected_total_reads: None,
            tissue: String::new(),
            fastq_expansion_factor: None,
            sort_memory_gib: None,
            final_mapping_rate: None,
        }
    }

    pub fn with_reads(mut self, reads: u64) -> Self {
        self.expected_total_reads = Some(reads);
        self
    }

    pub fn with_tissue(mut self, tissue: impl Into<String>) -> Self {
        self.tissue = tissue.into();
        self
    }

    pub fn with_mapping_rate(mut self, rate: f64) -> Self {
        self.final_mapping_rate = Some(rate);
        self
    }
}

/// Accepted compressed-size range, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionRange {
    pub min_bytes: u64,
    pub max_bytes: u64,
}

impl Default for AdmissionRange {
    fn default() -> Self {
        Self {
            min_bytes: 200_000_000,
            max_bytes: 30_000_000_000,
        }
    }
}

impl AdmissionRange {
    pub fn admits(&self, size: u64) -> bool {
        size > 0 && (self.min_bytes..=self.max_bytes).contains(&size)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("duplicate sra_id {0:?}")]
    DuplicateId(String),
    #[error("empty sra_id on row {0}")]
    EmptyId(usize),
    #[error("invalid {field} for {sra_id:?}: {value}")]
    InvalidField {
        sra_id: String,
        field: &'static str,
        value: f64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    sra_id: String,
    size_bytes: u64,
    expected_reads: Option<u64>,
    #[serde(default)]
    tissue: String,
    #[serde(default)]
    mapping_rate: Option<f64>,
    #[serde(default)]
    expansion: Option<f64>,
    #[serde(default)]
    sort_memory_gib: Option<f64>,
}

impl From<ManifestRow> for TaskSpec {
    fn from(row: ManifestRow) -> Self {
        Self {
            sra_id: row.sra_id,
            compressed_size_bytes: row.size_bytes,
            expected_total_reads: row.expected_reads,
            tissue: row.tissue,
            fastq_expansion_factor: row.expansion,
            sort_memory_gib: row.sort_memory_gib,
            final_mapping_rate: row.mapping_rate,
        }
    }
}

impl From<&TaskSpec> for ManifestRow {
    fn from(task: &TaskSpec) -> Self {
        Self {
            sra_id: task.sra_id.clone(),
            size_bytes: task.compressed_size_bytes,
            expected_reads: task.expected_total_reads,
            tissue: task.tissue.clone(),
            mapping_rate: task.final_mapping_rate,
            expansion: task.fastq_expansion_factor,
            sort_memory_gib: task.sort_memory_gib,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Rejection {
    SizeOutOfRange,
}

/// A validated manifest: admitted tasks plus those rejected by the size filter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub tasks: Vec<TaskSpec>,
    pub rejected: Vec<(TaskSpec, Rejection)>,
}

impl Manifest {
    /// Validates ids and per-task overrides, then partitions by size.
    pub fn from_tasks(tasks: Vec<TaskSpec>, range: AdmissionRange) -> Result<Self, ManifestError> {
        let mut seen = HashSet::new();
        let mut manifest = Manifest::default();
        for (row, task) in tasks.into_iter().enumerate() {
            if task.sra_id.trim().is_empty() {
                return Err(ManifestError::EmptyId(row + 1));
            }
            if !seen.insert(task.sra_id.clone()) {
                return Err(ManifestError::DuplicateId(task.sra_id));
            }
            check_field(&task, "mapping_rate", task.final_mapping_rate, |v| {
                (0.0..=1.0).contains(&v)
            })?;
            check_field(&task, "expansion", task.fastq_expansion_factor, |v| {
                v > 0.0 && v.is_finite()
            })?;
            check_field(&task, "sort_memory_gib", task.sort_memory_gib, |v| {
                v >= 0.0 && v.is_finite()
            })?;
            if range.admits(task.compressed_size_bytes) {
                manifest.tasks.push(task);
            } else {
                manifest.rejected.push((task, Rejection::SizeOutOfRange));
            }
        }
        Ok(manifest)
    }

    pub fn read_csv<R: Read>(reader: R, range: AdmissionRange) -> Result<Self, ManifestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let tasks = rdr
            .deserialize::<ManifestRow>()
            .map(|r| r.map(TaskSpec::from))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_tasks(tasks, range)
    }

    pub fn load(path: &Path, range: AdmissionRange) -> Result<Self, ManifestError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, range)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

fn check_field(
    task: &TaskSpec,
    field: &'static str,
    value: Option<f64>,
    ok: impl Fn(f64) -> bool,
) -> Result<(), ManifestError> {
    match value {
        Some(v) if !ok(v) => Err(ManifestError::InvalidField {
            sra_id: task.sra_id.clone(),
            field,
            value: v,
        }),
        _ => Ok(()),
    }
}

/// Writes tasks in manifest CSV form. Optional columns are always present.
pub fn write_manifest<W: Write>(writer: W, tasks: &[TaskSpec]) -> Result<(), ManifestError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for task in tasks {
        wtr.serialize(ManifestRow::from(task))?;
    }
    wtr.flush()?;
    Ok(())
}
