use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::scenario::Pricing;
use super::trace::{EventKind, FleetTrace};

/// Decimal gigabytes per gibibyte.
pub const GB_PER_GIB: f64 = 1.073_741_824;
const HOURS_PER_MONTH: f64 = 730.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CostBreakdown {
    pub compute: f64,
    pub storage: f64,
    pub transfer: f64,
    pub total: f64,
    /// `total / files_completed`; zero when nothing completed.
    pub per_file: f64,
}

/// Seconds until every one of `concurrent_workers` simultaneously started
/// downloads finishes. `None` when there are no workers.
pub fn index_distribution_time(
    index_size_gib: f64,
    concurrent_workers: u32,
    server_bandwidth_gib_s: f64,
    per_worker_cap_gib_s: Option<f64>,
) -> Option<f64> {
    if concurrent_workers == 0 {
        return None;
    }
    Some(index_size_gib / per_worker_rate(concurrent_workers as usize, server_bandwidth_gib_s, per_worker_cap_gib_s))
}

pub(crate) fn per_worker_rate(active: usize, server_bw: f64, cap: Option<f64>) -> f64 {
    let share = server_bw / active.max(1) as f64;
    cap.map_or(share, |c| c.min(share))
}

/// Transfer charge for one worker pulling the index.
pub fn index_transfer_cost(index_size_gib: f64, transfer_price_per_gb: f64) -> f64 {
    index_size_gib * GB_PER_GIB * transfer_price_per_gb
}

/// Prices a finished trace. Every `WorkerStart` pays one index transfer;
/// compute and attached storage are billed per instance-second.
pub fn cost_of(
    trace: &FleetTrace,
    pricing: &Pricing,
    hourly_price: f64,
    index_size_gib: f64,
    disk_gib: f64,
) -> CostBreakdown {
    let mut started: HashMap<u32, f64> = HashMap::new();
    let mut instance_seconds = 0.0;
    let mut launches = 0u64;
    let mut completed = 0u64;
    for ev in &trace.events {
        match ev.kind {
            EventKind::WorkerStart => {
                launches += 1;
                started.insert(ev.worker_id, ev.timestamp);
            }
            EventKind::WorkerStop => {
                if let Some(t0) = started.remove(&ev.worker_id) {
                    instance_seconds += ev.timestamp - t0;
                }
            }
            EventKind::TaskComplete => completed += 1,
            _ => {}
        }
    }
    // instances still running are billed to the end of the trace
    let end = trace.end_time();
    instance_seconds += started.values().map(|t0| end - t0).sum::<f64>();

    let hours = instance_seconds / 3600.0;
    let compute = hours * hourly_price * (1.0 - pricing.spot_discount);
    let storage = disk_gib * pricing.storage_price_gb_month * hours / HOURS_PER_MONTH;
    let transfer = launches as f64 * index_transfer_cost(index_size_gib, pricing.transfer_price_per_gb);
    let total = compute + storage + transfer;
    CostBreakdown {
        compute,
        storage,
        transfer,
        total,
        per_file: if completed > 0 { total / completed as f64 } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::trace::TraceEvent;
    use approx::assert_relative_eq;

    #[test]
    fn fifty_way_contention() {
        let t = index_distribution_time(29.5, 50, 1.756, None).unwrap();
        assert_relative_eq!(t, 29.5 / (1.756 / 50.0), epsilon = 1e-9);
        assert!((t / 60.0 - 14.0).abs() < 0.05);
    }

    #[test]
    fn single_flow_and_empty() {
        assert_relative_eq!(index_distribution_time(29.5, 1, 10.0, Some(1.0)).unwrap(), 29.5);
        assert_eq!(index_distribution_time(29.5, 0, 10.0, None), None);
    }

    #[test]
    fn transfer_per_worker() {
        assert_relative_eq!(index_transfer_cost(29.5, 0.01), 0.316_753_84, epsilon = 1e-8);
    }

    #[test]
    fn empty_trace_costs_nothing() {
        let c = cost_of(&FleetTrace::default(), &Pricing::default(), 0.6086, 29.5, 550.0);
        assert_eq!(c, CostBreakdown::default());
    }

    #[test]
    fn one_instance_hour() {
        let ev = |timestamp, kind| TraceEvent {
            timestamp,
            worker_id: 7,
            slot: 0,
            kind,
            sra_id: String::new(),
            detail: String::new(),
        };
        let trace = FleetTrace {
            events: vec![
                ev(0.0, EventKind::WorkerStart),
                ev(10.0, EventKind::TaskComplete),
                ev(3600.0, EventKind::WorkerStop),
            ],
        };
        let pricing = Pricing {
            spot_discount: 0.5,
            storage_price_gb_month: 0.073,
            transfer_price_per_gb: 0.01,
        };
        let c = cost_of(&trace, &pricing, 1.0, 29.5, 100.0);
        assert_relative_eq!(c.compute, 0.5);
        assert_relative_eq!(c.storage, 0.01, epsilon = 1e-12);
        assert_relative_eq!(c.transfer, 0.316_753_84, epsilon = 1e-8);
        assert_relative_eq!(c.total, c.compute + c.storage + c.transfer);
        assert_relative_eq!(c.per_file, c.total);
    }
}
