//! Append-only completion ledger. One JSON object per line; the latest record
//! for an id wins on readback, except that a `completed` record is final.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::worker::Stage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Completed,
    Failed,
    InProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub sra_id: String,
    pub status: RecordStatus,
    pub worker_id: String,
    pub stage_timings: BTreeMap<Stage, f64>,
    pub final_mapping_rate: Option<f64>,
    pub attempt: u32,
    pub terminated_early: bool,
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("{0:?} already has a completed record")]
    ConflictingCompletion(String),
    #[error("ledger I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Default)]
struct State {
    records: Vec<LedgerRecord>,
    latest: HashMap<String, RecordStatus>,
    completed: HashSet<String>,
    failures: HashMap<String, u32>,
    duplicate_completions: u64,
    writer: Option<BufWriter<File>>,
}

impl State {
    fn index(&mut self, rec: &LedgerRecord) {
        if self.completed.contains(&rec.sra_id) {
            return;
        }
        match rec.status {
            RecordStatus::Completed => {
                self.completed.insert(rec.sra_id.clone());
            }
            RecordStatus::Failed => *self.failures.entry(rec.sra_id.clone()).or_default() += 1,
            RecordStatus::InProgress => {}
        }
        self.latest.insert(rec.sra_id.clone(), rec.status);
    }
}

#[derive(Debug)]
pub struct Ledger {
    state: Mutex<State>,
    path: Option<PathBuf>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self {
            state: Mutex::new(State::default()),
            path: None,
        }
    }

    /// Opens a JSON-lines ledger, replaying existing records.
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let mut state = State::default();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: LedgerRecord = serde_json::from_str(&line)
                    .map_err(|source| LedgerError::Parse { line: n + 1, source })?;
                if rec.status == RecordStatus::Completed && state.completed.contains(&rec.sra_id) {
                    state.duplicate_completions += 1;
                    continue;
                }
                state.index(&rec);
                state.records.push(rec);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        state.writer = Some(BufWriter::new(file));
        Ok(Self {
            state: Mutex::new(state),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn already_processed(&self, sra_id: &str) -> bool {
        self.state.lock().unwrap().completed.contains(sra_id)
    }

    /// Appends a record. A second `completed` for the same id is dropped,
    /// counted in [`Ledger::duplicate_completions`] and reported as an error.
    pub fn record(&self, rec: LedgerRecord) -> Result<(), LedgerError> {
        let mut st = self.state.lock().unwrap();
        if rec.status == RecordStatus::Completed && st.completed.contains(&rec.sra_id) {
            st.duplicate_completions += 1;
            return Err(LedgerError::ConflictingCompletion(rec.sra_id));
        }
        if let Some(w) = st.writer.as_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(|e| LedgerError::Io(e.into()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        st.index(&rec);
        st.records.push(rec);
        Ok(())
    }

    pub fn status(&self, sra_id: &str) -> Option<RecordStatus> {
        self.state.lock().unwrap().latest.get(sra_id).copied()
    }

    pub fn failure_count(&self, sra_id: &str) -> u32 {
        self.state
            .lock()
            .unwrap()
            .failures
            .get(sra_id)
            .copied()
            .unwrap_or(0)
    }

    pub fn completed_count(&self) -> usize {
        self.state.lock().unwrap().completed.len()
    }

    pub fn duplicate_completions(&self) -> u64 {
        self.state.lock().unwrap().duplicate_completions
    }

    pub fn records(&self) -> Vec<LedgerRecord> {
        self.state.lock().unwrap().records.clone()
    }

    /// Latest status per id.
    pub fn statuses(&self) -> HashMap<String, RecordStatus> {
        self.state.lock().unwrap().latest.clone()
    }
}
