//! At-least-once work queue with visibility timeouts.
//!
//! A leased message is hidden until its `visible_after` deadline. If the
//! holder neither acks nor extends before then, the message becomes leasable
//! again with its attempt counter bumped. Every mutation is appended to an
//! optional JSON-lines journal and replayed on open.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::TaskSpec;

pub type MessageId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueId {
    Small,
    Large,
}

impl fmt::Display for QueueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueueId::Small => "small",
            QueueId::Large => "large",
        })
    }
}

/// Size routing: strictly below the threshold goes to the small queue.
pub fn route(task: &TaskSpec, size_threshold_bytes: u64) -> QueueId {
    if task.compressed_size_bytes < size_threshold_bytes {
        QueueId::Small
    } else {
        QueueId::Large
    }
}

/// Opaque lease token. Only the latest lease of a message is valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Receipt {
    message_id: MessageId,
    lease: u64,
}

impl Receipt {
    pub fn message_id(&self) -> MessageId {
        self.message_id
    }
}

impl fmt::Display for Receipt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.message_id, self.lease)
    }
}

impl FromStr for Receipt {
    type Err = QueueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, l) = s.split_once('.').ok_or(QueueError::UnknownReceipt)?;
        Ok(Receipt {
            message_id: m.parse().map_err(|_| QueueError::UnknownReceipt)?,
            lease: l.parse().map_err(|_| QueueError::UnknownReceipt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueMessage {
    pub id: MessageId,
    pub task: TaskSpec,
    /// Delivery count, starting at 1.
    pub attempt: u32,
    pub visible_after: f64,
    pub receipt: Option<Receipt>,
}

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("lease already expired; operation ignored")]
    ExpiredReceipt,
    #[error("unknown receipt")]
    UnknownReceipt,
    #[error("queue journal I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("queue journal line {line}: {source}")]
    Journal {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone)]
struct Entry {
    task: TaskSpec,
    attempt: u32,
    visible_after: f64,
    lease: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum JournalOp {
    Enqueue,
    Lease,
    Ack,
    Nack,
    Extend,
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalRecord {
    op: JournalOp,
    message_id: MessageId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<serde_json::Value>,
    timestamp: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LeasePayload {
    lease: u64,
    visible_after: f64,
}

#[derive(Debug, Default)]
struct State {
    entries: BTreeMap<MessageId, Entry>,
    next_id: MessageId,
    next_lease: u64,
    journal: Option<BufWriter<File>>,
}

impl State {
    fn log(&mut self, record: JournalRecord) -> Result<(), QueueError> {
        if let Some(journal) = self.journal.as_mut() {
            serde_json::to_writer(&mut *journal, &record)
                .map_err(|e| QueueError::Io(e.into()))?;
            journal.write_all(b"\n")?;
            journal.flush()?;
        }
        Ok(())
    }

    fn apply(&mut self, record: &JournalRecord) -> Result<(), serde_json::Error> {
        let id = record.message_id;
        match record.op {
            JournalOp::Enqueue => {
                let task: TaskSpec = serde_json::from_value(
                    record.payload.clone().unwrap_or(serde_json::Value::Null),
                )?;
                self.entries.insert(
                    id,
                    Entry {
                        task,
                        attempt: 0,
                        visible_after: record.timestamp,
                        lease: None,
                    },
                );
                self.next_id = self.next_id.max(id + 1);
            }
            JournalOp::Lease => {
                let p: LeasePayload = serde_json::from_value(
                    record.payload.clone().unwrap_or(serde_json::Value::Null),
                )?;
                if let Some(e) = self.entries.get_mut(&id) {
                    e.attempt += 1;
                    e.lease = Some(p.lease);
                    e.visible_after = p.visible_after;
                }
                self.next_lease = self.next_lease.max(p.lease + 1);
            }
            JournalOp::Ack => {
                self.entries.remove(&id);
            }
            JournalOp::Nack => {
                if let Some(e) = self.entries.get_mut(&id) {
                    e.lease = None;
                    e.visible_after = record.timestamp;
                }
            }
            JournalOp::Extend => {
                let p: LeasePayload = serde_json::from_value(
                    record.payload.clone().unwrap_or(serde_json::Value::Null),
                )?;
                if let Some(e) = self.entries.get_mut(&id) {
                    e.visible_after = p.visible_after;
                }
            }
        }
        Ok(())
    }

    /// Validates a receipt against the live lease.
    fn check(&self, receipt: &Receipt, now: f64) -> Result<(), QueueError> {
        let entry = self
            .entries
            .get(&receipt.message_id)
            .ok_or(QueueError::UnknownReceipt)?;
        match entry.lease {
            Some(l) if l == receipt.lease => {
                if now > entry.visible_after {
                    Err(QueueError::ExpiredReceipt)
                } else {
                    Ok(())
                }
            }
            Some(l) if l > receipt.lease => Err(QueueError::ExpiredReceipt),
            None if receipt.lease < self.next_lease => Err(QueueError::ExpiredReceipt),
            _ => Err(QueueError::UnknownReceipt),
        }
    }
}

/// A single visibility-timeout queue. All methods take `&self` and are
/// linearizable; the journal has one writer behind the internal lock.
#[derive(Debug)]
pub struct WorkQueue {
    state: Mutex<State>,
    path: Option<PathBuf>,
}

impl Default for WorkQueue {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl WorkQueue {
    pub fn in_memory() -> Self {
        Self {
            state: Mutex::new(State::default()),
            path: None,
        }
    }

    /// Opens (creating if needed) a journal-backed queue, replaying existing records.
    pub fn open(path: &Path) -> Result<Self, QueueError> {
        let mut state = State::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: JournalRecord = serde_json::from_str(&line)
                    .map_err(|source| QueueError::Journal { line: n + 1, source })?;
                state
                    .apply(&record)
                    .map_err(|source| QueueError::Journal { line: n + 1, source })?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        state.journal = Some(BufWriter::new(file));
        Ok(Self {
            state: Mutex::new(state),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn enqueue(&self, task: TaskSpec, now: f64) -> Result<MessageId, QueueError> {
        let mut st = self.state.lock().unwrap();
        let id = st.next_id;
        st.log(JournalRecord {
            op: JournalOp::Enqueue,
            message_id: id,
            payload: Some(serde_json::to_value(&task).map_err(|e| QueueError::Io(e.into()))?),
            timestamp: now,
        })?;
        st.next_id += 1;
        st.entries.insert(
            id,
            Entry {
                task,
                attempt: 0,
                visible_after: now,
                lease: None,
            },
        );
        Ok(id)
    }

    /// Leases the oldest visible message, hiding it for `visibility_seconds`.
    pub fn lease(
        &self,
        visibility_seconds: f64,
        now: f64,
    ) -> Result<Option<QueueMessage>, QueueError> {
        let mut st = self.state.lock().unwrap();
        let Some(id) = st
            .entries
            .iter()
            .find(|(_, e)| e.visible_after <= now)
            .map(|(id, _)| *id)
        else {
            return Ok(None);
        };
        let lease = st.next_lease;
        let visible_after = now + visibility_seconds;
        st.log(JournalRecord {
            op: JournalOp::Lease,
            message_id: id,
            payload: Some(serde_json::json!({ "lease": lease, "visible_after": visible_after })),
            timestamp: now,
        })?;
        st.next_lease += 1;
        let entry = st.entries.get_mut(&id).expect("entry present");
        entry.attempt += 1;
        entry.lease = Some(lease);
        entry.visible_after = visible_after;
        Ok(Some(QueueMessage {
            id,
            task: entry.task.clone(),
            attempt: entry.attempt,
            visible_after,
            receipt: Some(Receipt {
                message_id: id,
                lease,
            }),
        }))
    }

    /// Removes the message permanently.
    pub fn ack(&self, receipt: &Receipt, now: f64) -> Result<(), QueueError> {
        let mut st = self.state.lock().unwrap();
        st.check(receipt, now)?;
        st.log(JournalRecord {
            op: JournalOp::Ack,
            message_id: receipt.message_id,
            payload: None,
            timestamp: now,
        })?;
        st.entries.remove(&receipt.message_id);
        Ok(())
    }

    /// Returns the message to the queue, visible immediately.
    pub fn nack(&self, receipt: &Receipt, now: f64) -> Result<(), QueueError> {
        let mut st = self.state.lock().unwrap();
        st.check(receipt, now)?;
        st.log(JournalRecord {
            op: JournalOp::Nack,
            message_id: receipt.message_id,
            payload: None,
            timestamp: now,
        })?;
        let entry = st.entries.get_mut(&receipt.message_id).expect("checked");
        entry.lease = None;
        entry.visible_after = now;
        Ok(())
    }

    /// Pushes the visibility deadline to `now + seconds`.
    pub fn extend(&self, receipt: &Receipt, seconds: f64, now: f64) -> Result<f64, QueueError> {
        let mut st = self.state.lock().unwrap();
        st.check(receipt, now)?;
        let visible_after = now + seconds;
        st.log(JournalRecord {
            op: JournalOp::Extend,
            message_id: receipt.message_id,
            payload: Some(serde_json::json!({ "lease": receipt.lease, "visible_after": visible_after })),
            timestamp: now,
        })?;
        st.entries
            .get_mut(&receipt.message_id)
            .expect("checked")
            .visible_after = visible_after;
        Ok(visible_after)
    }

    /// Messages not yet acked (leased or waiting).
    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visible_count(&self, now: f64) -> usize {
        let st = self.state.lock().unwrap();
        st.entries.values().filter(|e| e.visible_after <= now).count()
    }

    /// Earliest time any unacked message becomes visible.
    pub fn next_visible_at(&self) -> Option<f64> {
        let st = self.state.lock().unwrap();
        st.entries
            .values()
            .map(|e| e.visible_after)
            .min_by(f64::total_cmp)
    }

    pub fn pending_ids(&self) -> HashSet<String> {
        let st = self.state.lock().unwrap();
        st.entries.values().map(|e| e.task.sra_id.clone()).collect()
    }
}

/// One or two queues with size-based routing. Without a threshold every task
/// lands in the small queue.
#[derive(Debug)]
pub struct QueueSet {
    small: WorkQueue,
    large: Option<WorkQueue>,
    size_threshold_bytes: Option<u64>,
}

impl QueueSet {
    pub fn single(queue: WorkQueue) -> Self {
        Self {
            small: queue,
            large: None,
            size_threshold_bytes: None,
        }
    }

    pub fn double(small: WorkQueue, large: WorkQueue, size_threshold_bytes: u64) -> Self {
        assert!(size_threshold_bytes > 0, "size threshold must be positive");
        Self {
            small,
            large: Some(large),
            size_threshold_bytes: Some(size_threshold_bytes),
        }
    }

    pub fn in_memory(size_threshold_bytes: Option<u64>) -> Self {
        match size_threshold_bytes {
            Some(t) => Self::double(WorkQueue::in_memory(), WorkQueue::in_memory(), t),
            None => Self::single(WorkQueue::in_memory()),
        }
    }

    /// Journal-backed set under `dir` (`queue-small.jsonl`, `queue-large.jsonl`).
    pub fn open(dir: &Path, size_threshold_bytes: Option<u64>) -> Result<Self, QueueError> {
        let small = WorkQueue::open(&dir.join("queue-small.jsonl"))?;
        Ok(match size_threshold_bytes {
            Some(t) => Self::double(small, WorkQueue::open(&dir.join("queue-large.jsonl"))?, t),
            None => Self::single(small),
        })
    }

    pub fn is_double(&self) -> bool {
        self.large.is_some()
    }

    pub fn route(&self, task: &TaskSpec) -> QueueId {
        match self.size_threshold_bytes {
            Some(t) => route(task, t),
            None => QueueId::Small,
        }
    }

    pub fn queue(&self, id: QueueId) -> &WorkQueue {
        match id {
            QueueId::Small => &self.small,
            QueueId::Large => self.large.as_ref().unwrap_or(&self.small),
        }
    }

    pub fn ids(&self) -> Vec<QueueId> {
        if self.is_double() {
            vec![QueueId::Small, QueueId::Large]
        } else {
            vec![QueueId::Small]
        }
    }

    pub fn enqueue(&self, task: TaskSpec, now: f64) -> Result<(QueueId, MessageId), QueueError> {
        let id = self.route(&task);
        Ok((id, self.queue(id).enqueue(task, now)?))
    }

    /// Tries the queues in `order` and leases from the first with a visible message.
    pub fn lease(
        &self,
        order: &[QueueId],
        visibility_seconds: f64,
        now: f64,
    ) -> Result<Option<(QueueId, QueueMessage)>, QueueError> {
        for &id in order {
            if id == QueueId::Large && !self.is_double() {
                continue;
            }
            if let Some(msg) = self.queue(id).lease(visibility_seconds, now)? {
                return Ok(Some((id, msg)));
            }
        }
        Ok(None)
    }

    pub fn len(&self) -> usize {
        self.small.len() + self.large.as_ref().map_or(0, WorkQueue::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pending_ids(&self) -> HashSet<String> {
        let mut ids = self.small.pending_ids();
        if let Some(large) = &self.large {
            ids.extend(large.pending_ids());
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str, size: u64) -> TaskSpec {
        TaskSpec::new(id, size)
    }

    const GIB: u64 = 1 << 30;

    #[test]
    fn routing_examples() {
        let threshold = 10 * GIB;
        assert_eq!(route(&task("a", 2_500_000_000), threshold), QueueId::Small);
        assert_eq!(route(&task("b", 29_900_000_000), threshold), QueueId::Large);
        assert_eq!(route(&task("c", threshold), threshold), QueueId::Large);
        assert_eq!(route(&task("d", threshold - 1), threshold), QueueId::Small);
    }

    #[test]
    fn unacked_lease_reappears_after_visibility() {
        let q = WorkQueue::in_memory();
        q.enqueue(task("A", 1), 0.0).unwrap();
        let first = q.lease(30.0, 0.0).unwrap().unwrap();
        assert_eq!(first.attempt, 1);
        assert!(q.lease(30.0, 10.0).unwrap().is_none());
        let second = q.lease(30.0, 31.0).unwrap().unwrap();
        assert_eq!(second.task.sra_id, "A");
        assert_eq!(second.attempt, 2);
        // the stale receipt can no longer ack
        assert!(matches!(
            q.ack(first.receipt.as_ref().unwrap(), 32.0),
            Err(QueueError::ExpiredReceipt)
        ));
        q.ack(second.receipt.as_ref().unwrap(), 32.0).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn ack_removes_permanently() {
        let q = WorkQueue::in_memory();
        q.enqueue(task("A", 1), 0.0).unwrap();
        let m = q.lease(30.0, 0.0).unwrap().unwrap();
        q.ack(&m.receipt.unwrap(), 1.0).unwrap();
        assert!(q.lease(30.0, 1000.0).unwrap().is_none());
        assert!(matches!(
            q.ack(&m.receipt.unwrap(), 2.0),
            Err(QueueError::UnknownReceipt)
        ));
    }

    #[test]
    fn nack_redelivers_immediately() {
        let q = WorkQueue::in_memory();
        q.enqueue(task("A", 1), 0.0).unwrap();
        let m = q.lease(30.0, 0.0).unwrap().unwrap();
        q.nack(&m.receipt.unwrap(), 1.0).unwrap();
        let again = q.lease(30.0, 1.0).unwrap().unwrap();
        assert_eq!(again.attempt, 2);
        assert!(matches!(
            q.nack(&m.receipt.unwrap(), 1.0),
            Err(QueueError::ExpiredReceipt)
        ));
    }

    #[test]
    fn expired_ack_is_reported_and_ignored() {
        let q = WorkQueue::in_memory();
        q.enqueue(task("A", 1), 0.0).unwrap();
        let m = q.lease(30.0, 0.0).unwrap().unwrap();
        assert!(matches!(
            q.ack(&m.receipt.unwrap(), 40.0),
            Err(QueueError::ExpiredReceipt)
        ));
        assert_eq!(q.len(), 1);
        assert_eq!(q.lease(30.0, 40.0).unwrap().unwrap().attempt, 2);
    }

    #[test]
    fn extend_keeps_message_hidden() {
        let q = WorkQueue::in_memory();
        q.enqueue(task("A", 1), 0.0).unwrap();
        let m = q.lease(30.0, 0.0).unwrap().unwrap();
        let r = m.receipt.unwrap();
        assert_eq!(q.extend(&r, 60.0, 20.0).unwrap(), 80.0);
        assert!(q.lease(30.0, 50.0).unwrap().is_none());
        q.ack(&r, 70.0).unwrap();
    }

    #[test]
    fn unknown_receipt() {
        let q = WorkQueue::in_memory();
        let bogus: Receipt = "7.3".parse().unwrap();
        assert!(matches!(q.ack(&bogus, 0.0), Err(QueueError::UnknownReceipt)));
        assert!("nope".parse::<Receipt>().is_err());
    }

    #[test]
    fn journal_replay_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        {
            let q = WorkQueue::open(&path).unwrap();
            q.enqueue(task("A", 1), 0.0).unwrap();
            q.enqueue(task("B", 2), 0.0).unwrap();
            q.enqueue(task("C", 3), 0.0).unwrap();
            let a = q.lease(100.0, 1.0).unwrap().unwrap();
            q.ack(&a.receipt.unwrap(), 2.0).unwrap();
            let b = q.lease(100.0, 3.0).unwrap().unwrap();
            q.extend(&b.receipt.unwrap(), 500.0, 4.0).unwrap();
        }
        let q = WorkQueue::open(&path).unwrap();
        assert_eq!(q.len(), 2);
        // B is still leased until 504
        let c = q.lease(10.0, 5.0).unwrap().unwrap();
        assert_eq!(c.task.sra_id, "C");
        assert!(q.lease(10.0, 6.0).unwrap().is_none());
        let b = q.lease(10.0, 505.0).unwrap().unwrap();
        assert_eq!((b.task.sra_id.as_str(), b.attempt), ("B", 2));
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["op"], "enqueue");
        assert_eq!(first["message_id"], 0);
        assert!(first["timestamp"].is_number());
        assert_eq!(first["payload"]["sra_id"], "A");
    }

    #[test]
    fn queue_set_partitions() {
        let set = QueueSet::in_memory(Some(10 * GIB));
        set.enqueue(task("s", GIB), 0.0).unwrap();
        set.enqueue(task("l", 20 * GIB), 0.0).unwrap();
        assert_eq!(set.queue(QueueId::Small).len(), 1);
        assert_eq!(set.queue(QueueId::Large).len(), 1);
        let (qid, m) = set
            .lease(&[QueueId::Large, QueueId::Small], 10.0, 0.0)
            .unwrap()
            .unwrap();
        assert_eq!((qid, m.task.sra_id.as_str()), (QueueId::Large, "l"));

        let single = QueueSet::in_memory(None);
        single.enqueue(task("l", 20 * GIB), 0.0).unwrap();
        assert_eq!(single.route(&task("l", 20 * GIB)), QueueId::Small);
        assert_eq!(single.len(), 1);
    }
}
