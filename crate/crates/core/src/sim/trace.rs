use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    WorkerStart,
    IndexLoaded,
    TaskStart,
    StageDone,
    EarlyStop,
    Interrupted,
    TaskComplete,
    TaskFailed,
    WorkerStop,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One row of `trace.csv`. `worker_id` is unique per instance; `slot` is the
/// fleet position it occupies (replacements inherit the slot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub timestamp: f64,
    pub worker_id: u32,
    pub slot: u32,
    pub kind: EventKind,
    pub sra_id: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FleetTrace {
    pub events: Vec<TraceEvent>,
}

impl FleetTrace {
    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.of_kind(kind).count()
    }

    pub fn end_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.timestamp)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(writer);
        if self.events.is_empty() {
            wtr.write_record(["timestamp", "worker_id", "slot", "kind", "sra_id", "detail"])?;
        }
        for ev in &self.events {
            wtr.serialize(ev)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, csv::Error> {
        let events = csv::Reader::from_reader(reader)
            .deserialize()
            .collect::<Result<Vec<TraceEvent>, _>>()?;
        Ok(Self { events })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub t: f64,
    pub running_instances: u32,
    pub cumulative_completed: u64,
}

/// Fleet state sampled at `0, bucket, 2*bucket, ...` through the first
/// boundary at or after the last event. An empty trace has no rows.
pub fn emit_timeline(trace: &FleetTrace, bucket_seconds: f64) -> Vec<TimelineRow> {
    assert!(bucket_seconds > 0.0, "bucket must be positive");
    if trace.events.is_empty() {
        return Vec::new();
    }
    let buckets = (trace.end_time() / bucket_seconds).ceil() as u64;
    let mut rows = Vec::with_capacity(buckets as usize + 1);
    let mut events = trace.events.iter().peekable();
    let (mut running, mut completed) = (0i64, 0u64);
    for k in 0..=buckets {
        let t = k as f64 * bucket_seconds;
        while let Some(ev) = events.next_if(|e| e.timestamp <= t) {
            match ev.kind {
                EventKind::WorkerStart => running += 1,
                EventKind::WorkerStop => running -= 1,
                EventKind::TaskComplete => completed += 1,
                _ => {}
            }
        }
        rows.push(TimelineRow {
            t,
            running_instances: running.max(0) as u32,
            cumulative_completed: completed,
        });
    }
    rows
}

pub fn write_timeline_csv<W: Write>(writer: W, rows: &[TimelineRow]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        wtr.write_record(["t", "running_instances", "cumulative_completed"])?;
    }
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_timeline_csv<R: Read>(reader: R) -> Result<Vec<TimelineRow>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}
