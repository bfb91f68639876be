use std::collections::HashMap;

use alignfleet_core::perf::{amdahl_speedup, fit_parallel_fraction, rank_instances};
use alignfleet_core::progress::{parse_progress_line, parse_progress_log, ColumnMap};
use alignfleet_core::sweep::{random_trajectories, sweep_thresholds, SampledTrajectory};
use alignfleet_core::{InstanceType, TaskSpec, WorkQueue};
use proptest::prelude::*;

proptest! {
    #[test]
    fn parser_is_total(line in ".{0,200}") {
        let _ = parse_progress_line(&line, &ColumnMap::default());
        let _ = parse_progress_log(&line, &ColumnMap::default());
    }

    #[test]
    fn parser_survives_token_soup(tokens in prop::collection::vec(
        prop_oneof![
            Just("Jan".to_string()), Just("23:59:59".to_string()), Just("99.9%".to_string()),
            Just("-1".to_string()), Just("NaN".to_string()), Just("1e308".to_string()),
            Just("%".to_string()), "[0-9:.%]{1,10}",
        ],
        0..20,
    )) {
        let line = tokens.join(" ");
        if let Ok(s) = parse_progress_line(&line, &ColumnMap::default()) {
            prop_assert!((0.0..=1.0).contains(&s.pct_unique_mapped));
            prop_assert!((0.0..=1.0).contains(&s.pct_multi_mapped));
        }
    }

    #[test]
    fn fit_round_trips(p in 0.5f64..0.9999, threads in prop::collection::btree_set(2u32..64, 1..6)) {
        let points: Vec<(f64, f64)> = threads
            .iter()
            .map(|&t| (f64::from(t), amdahl_speedup(p, f64::from(t)).unwrap()))
            .collect();
        let fitted = fit_parallel_fraction(&points).unwrap();
        prop_assert!((fitted - p).abs() < 1e-6, "{fitted} vs {p}");
    }

    #[test]
    fn ranking_ignores_uniform_price_scaling(
        rows in prop::collection::vec((0.05f64..5.0, 0.5f64..50.0), 1..8),
        scale in 0.1f64..10.0,
    ) {
        let build = |k: f64| -> Vec<(InstanceType, f64)> {
            rows.iter()
                .enumerate()
                .map(|(i, &(price, hours))| (InstanceType::new(format!("i{i}"), 8, 4, 64.0, price * k), hours))
                .collect()
        };
        let names = |k: f64| -> Vec<String> {
            rank_instances(&build(k)).unwrap().into_iter().map(|r| r.instance.name).collect()
        };
        prop_assert_eq!(names(1.0), names(scale));
    }

    #[test]
    fn sweep_is_monotone(seed in any::<u64>(), mut thresholds in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let set: Vec<_> = random_trajectories(20, seed)
            .iter()
            .map(|t| SampledTrajectory::new(t, t.duration_seconds() / 40.0))
            .collect();
        thresholds.push(0.0);
        thresholds.sort_by(f64::total_cmp);
        let rows = sweep_thresholds(&set, &thresholds, 0.1);
        for w in rows.windows(2) {
            prop_assert!(w[1].total_align_time <= w[0].total_align_time);
            prop_assert!(w[1].terminated_count >= w[0].terminated_count);
        }
        let baseline: f64 = set.iter().map(|t| t.duration_seconds).sum();
        prop_assert_eq!(rows[0].total_align_time, baseline);
        prop_assert_eq!(rows[0].terminated_count, 0);
    }

    /// Random interleavings of lease/ack/nack never lose or duplicate a task.
    #[test]
    fn queue_delivers_each_task_to_exactly_one_ack(
        n in 1usize..20,
        ops in prop::collection::vec((0u8..3, 0.0f64..50.0), 0..200),
    ) {
        let q = WorkQueue::in_memory();
        for i in 0..n {
            q.enqueue(TaskSpec::new(format!("T{i}"), 1), 0.0).unwrap();
        }
        let mut now = 0.0;
        let mut held = Vec::new();
        let mut acked: HashMap<String, usize> = HashMap::new();
        for (op, dt) in ops {
            now += dt;
            match op {
                0 => {
                    if let Some(m) = q.lease(30.0, now).unwrap() {
                        held.push(m);
                    }
                }
                1 => {
                    if let Some(m) = held.pop() {
                        // a lapsed lease may be rejected; that is the point
                        if q.ack(m.receipt.as_ref().unwrap(), now).is_ok() {
                            *acked.entry(m.task.sra_id).or_default() += 1;
                        }
                    }
                }
                _ => {
                    if let Some(m) = held.pop() {
                        let _ = q.nack(m.receipt.as_ref().unwrap(), now);
                    }
                }
            }
        }
        // drain
        now += 1e6;
        while let Some(m) = q.lease(30.0, now).unwrap() {
            q.ack(m.receipt.as_ref().unwrap(), now).unwrap();
            *acked.entry(m.task.sra_id).or_default() += 1;
        }
        prop_assert_eq!(acked.len(), n);
        prop_assert!(acked.values().all(|&c| c == 1));
        prop_assert!(q.is_empty());
    }
}
