//! Thread scaling, alignment duration, instance ranking and core allocation.
//!
//! Scaling follows Amdahl's law, `S(t) = 1 / ((1 - p) + p / t)`, where `p` is
//! the share of alignment work that parallelizes. On SMT instances threads
//! beyond the physical core count only add `smt_penalty` of a core each.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerfError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient data: need at least one point with more than one thread")]
    InsufficientData,
    #[error("pricing CSV: {0}")]
    Csv(String),
}

fn domain(msg: impl Into<String>) -> PerfError {
    PerfError::Domain(msg.into())
}

/// Amdahl speedup for parallel fraction `p` at `threads` (may be fractional).
pub fn amdahl_speedup(p: f64, threads: f64) -> Result<f64, PerfError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(domain(format!("parallel fraction {p} outside [0, 1]")));
    }
    if !(threads >= 1.0) || !threads.is_finite() {
        return Err(domain(format!("thread count {threads} below 1")));
    }
    Ok(1.0 / ((1.0 - p) + p / threads))
}

/// `p` that yields `speedup` at `threads`, clamped to `[0, 1]`.
pub fn invert_speedup(threads: f64, speedup: f64) -> Result<f64, PerfError> {
    if !(threads > 1.0) || !threads.is_finite() {
        return Err(PerfError::InsufficientData);
    }
    if !(speedup > 0.0) || !speedup.is_finite() {
        return Err(domain(format!("speedup {speedup} must be positive")));
    }
    Ok(((1.0 - 1.0 / speedup) / (1.0 - 1.0 / threads)).clamp(0.0, 1.0))
}

/// Least-squares fit of `p` to `(threads, speedup)` points. Points at one
/// thread carry no information and are ignored.
pub fn fit_parallel_fraction(points: &[(f64, f64)]) -> Result<f64, PerfError> {
    let usable: Vec<(f64, f64)> = points.iter().copied().filter(|&(t, _)| t > 1.0).collect();
    for &(t, s) in &usable {
        if !t.is_finite() || !(s > 0.0) || !s.is_finite() {
            return Err(domain(format!("invalid calibration point ({t}, {s})")));
        }
    }
    match usable.as_slice() {
        [] => Err(PerfError::InsufficientData),
        [(t, s)] => invert_speedup(*t, *s),
        _ => {
            let sse = |p: f64| -> f64 {
                usable
                    .iter()
                    .map(|&(t, s)| {
                        let r = 1.0 / ((1.0 - p) + p / t) - s;
                        r * r
                    })
                    .sum()
            };
            // coarse scan, then golden-section inside the best bracket
            const STEPS: usize = 2000;
            let best = (0..=STEPS)
                .map(|i| i as f64 / STEPS as f64)
                .min_by(|a, b| sse(*a).total_cmp(&sse(*b)))
                .unwrap_or(0.0);
            let step = 1.0 / STEPS as f64;
            Ok(golden_section(sse, (best - step).max(0.0), (best + step).min(1.0)))
        }
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if hi - lo < 1e-15 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    (lo + hi) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingModel {
    pub parallel_fraction: f64,
    /// Physical cores; threads beyond this count at `smt_penalty` weight.
    pub physical_cores: Option<u32>,
    pub smt_penalty: f64,
    /// Measured `(threads, speedup)` points. When present they override the
    /// closed form inside their range.
    pub calibration_points: Vec<(f64, f64)>,
}

impl Default for ScalingModel {
    fn default() -> Self {
        Self {
            parallel_fraction: 0.9873,
            physical_cores: None,
            smt_penalty: 0.55,
            calibration_points: Vec::new(),
        }
    }
}

impl ScalingModel {
    pub fn amdahl(parallel_fraction: f64) -> Self {
        Self {
            parallel_fraction,
            ..Self::default()
        }
    }

    pub fn with_smt(mut self, physical_cores: u32, smt_penalty: f64) -> Self {
        self.physical_cores = Some(physical_cores);
        self.smt_penalty = smt_penalty;
        self
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        if !(0.0..=1.0).contains(&self.parallel_fraction) {
            return Err(domain("parallel_fraction outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.smt_penalty) {
            return Err(domain("smt_penalty outside [0, 1]"));
        }
        if self.physical_cores == Some(0) {
            return Err(domain("physical_cores must be positive"));
        }
        Ok(())
    }

    /// Core-equivalents delivered by `threads` threads.
    pub fn effective_threads(&self, threads: f64) -> f64 {
        match self.physical_cores {
            Some(cores) if threads > f64::from(cores) => {
                let cores = f64::from(cores);
                cores + self.smt_penalty * (threads - cores)
            }
            _ => threads,
        }
    }

    fn closed_form(&self, threads: f64) -> Result<f64, PerfError> {
        amdahl_speedup(self.parallel_fraction, self.effective_threads(threads).max(1.0))
    }

    pub fn speedup(&self, threads: f64) -> Result<f64, PerfError> {
        if !(threads >= 1.0) {
            return Err(domain(format!("thread count {threads} below 1")));
        }
        if self.calibration_points.is_empty() {
            return self.closed_form(threads);
        }
        let mut points: Vec<(f64, f64)> = std::iter::once((1.0, 1.0))
            .chain(self.calibration_points.iter().copied().filter(|&(t, _)| t > 1.0))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        points.dedup_by(|a, b| a.0 == b.0);
        let &(last_t, last_s) = points.last().expect("non-empty");
        if threads >= last_t {
            return Ok(last_s * self.closed_form(threads)? / self.closed_form(last_t)?);
        }
        let i = points.partition_point(|&(t, _)| t <= threads);
        let (t0, s0) = points[i - 1];
        let (t1, s1) = points[i];
        Ok(s0 + (s1 - s0) * (threads - t0) / (t1 - t0))
    }

    pub fn efficiency(&self, threads: f64) -> Result<f64, PerfError> {
        Ok(self.speedup(threads)? / threads)
    }
}

/// Separate scaling per input-size class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeClassScaling {
    pub boundary_bytes: u64,
    pub small: ScalingModel,
    pub large: ScalingModel,
}

impl Default for SizeClassScaling {
    fn default() -> Self {
        Self {
            boundary_bytes: 5 * (1 << 30),
            small: ScalingModel::amdahl(0.9873),
            large: ScalingModel::amdahl(0.9741),
        }
    }
}

impl SizeClassScaling {
    pub fn uniform(model: ScalingModel) -> Self {
        Self {
            boundary_bytes: u64::MAX,
            small: model.clone(),
            large: model,
        }
    }

    pub fn for_size(&self, size_bytes: f64) -> &ScalingModel {
        if size_bytes < self.boundary_bytes as f64 {
            &self.small
        } else {
            &self.large
        }
    }
}

/// Seconds to align `size_bytes` with `threads` threads.
pub fn align_duration(
    model: &ScalingModel,
    size_bytes: f64,
    threads: f64,
    base_throughput_bytes_per_thread_second: f64,
) -> Result<f64, PerfError> {
    if !(size_bytes > 0.0) {
        return Err(domain("file size must be positive"));
    }
    if !(base_throughput_bytes_per_thread_second > 0.0) {
        return Err(domain("throughput must be positive"));
    }
    Ok(size_bytes / (base_throughput_bytes_per_thread_second * model.speedup(threads)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceType {
    pub name: String,
    pub vcpus: u32,
    pub physical_cores: u32,
    pub smt: bool,
    pub ram_gib: f64,
    pub on_demand_price_per_hour: f64,
    /// Typical spot discount range.
    pub spot_discount: (f64, f64),
}

impl InstanceType {
    pub fn new(name: impl Into<String>, vcpus: u32, physical_cores: u32, ram_gib: f64, price: f64) -> Self {
        Self {
            name: name.into(),
            vcpus,
            physical_cores,
            smt: vcpus > physical_cores,
            ram_gib,
            on_demand_price_per_hour: price,
            spot_discount: (0.50, 0.60),
        }
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        if self.physical_cores == 0 || self.vcpus < self.physical_cores {
            return Err(domain(format!("{}: need vcpus >= cores >= 1", self.name)));
        }
        if self.smt != (self.vcpus > self.physical_cores) {
            return Err(domain(format!("{}: smt flag inconsistent with core counts", self.name)));
        }
        if !(self.on_demand_price_per_hour >= 0.0) || !(self.ram_gib > 0.0) {
            return Err(domain(format!("{}: invalid price or RAM", self.name)));
        }
        Ok(())
    }

    pub fn price_per_vcpu_hour(&self) -> f64 {
        self.on_demand_price_per_hour / f64::from(self.vcpus)
    }

    pub fn r7a_2xlarge() -> Self {
        Self::new("r7a.2xlarge", 8, 8, 64.0, 0.6086)
    }
}

#[derive(Debug, Deserialize)]
struct PricingRow {
    name: String,
    vcpus: u32,
    cores: u32,
    ram_gib: f64,
    price_per_hour: f64,
    #[serde(default)]
    total_hours: Option<f64>,
}

/// Reads `name,vcpus,cores,ram_gib,price_per_hour[,total_hours]`.
pub fn read_pricing_csv<R: Read>(reader: R) -> Result<Vec<(InstanceType, Option<f64>)>, PerfError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for row in rdr.deserialize::<PricingRow>() {
        let row = row.map_err(|e| PerfError::Csv(e.to_string()))?;
        let instance = InstanceType::new(row.name, row.vcpus, row.cores, row.ram_gib, row.price_per_hour);
        instance.validate()?;
        rows.push((instance, row.total_hours));
    }
    if rows.is_empty() {
        return Err(PerfError::Csv("no rows".into()));
    }
    Ok(rows)
}

#[derive(Debug, Deserialize)]
struct ScalingRow {
    #[serde(default)]
    class: Option<String>,
    threads: f64,
    #[serde(default)]
    speedup: Option<f64>,
    #[serde(default)]
    efficiency: Option<f64>,
}

/// Reads `[class,]threads,speedup` or `[class,]threads,efficiency` rows and
/// groups them by class (`"all"` when the column is absent).
pub fn read_scaling_points<R: Read>(reader: R) -> Result<BTreeMap<String, Vec<(f64, f64)>>, PerfError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rdr.deserialize::<ScalingRow>() {
        let row = row.map_err(|e| PerfError::Csv(e.to_string()))?;
        let speedup = match (row.speedup, row.efficiency) {
            (Some(s), _) => s,
            (None, Some(e)) => e * row.threads,
            (None, None) => return Err(PerfError::Csv("row needs speedup or efficiency".into())),
        };
        groups
            .entry(row.class.unwrap_or_else(|| "all".into()))
            .or_default()
            .push((row.threads, speedup));
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedInstance {
    pub rank: usize,
    pub instance: InstanceType,
    pub total_hours: f64,
    pub total_cost: f64,
}

/// Ranks by total cost (`price * hours`), then hours, then name.
pub fn rank_instances(rows: &[(InstanceType, f64)]) -> Result<Vec<RankedInstance>, PerfError> {
    let mut ranked = Vec::with_capacity(rows.len());
    for (instance, hours) in rows {
        if !(*hours > 0.0) {
            return Err(domain(format!("{}: hours must be positive", instance.name)));
        }
        ranked.push(RankedInstance {
            rank: 0,
            instance: instance.clone(),
            total_hours: *hours,
            total_cost: instance.on_demand_price_per_hour * hours,
        });
    }
    ranked.sort_by(|a, b| {
        a.total_cost
            .total_cmp(&b.total_cost)
            .then(a.total_hours.total_cmp(&b.total_hours))
            .then_with(|| a.instance.name.cmp(&b.instance.name))
    });
    for (i, r) in ranked.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreadCostInputs {
    pub per_vcpu_price: f64,
    pub fixed_overhead_price: f64,
    /// Share of single-thread wall time spent outside alignment.
    pub non_align_fraction: f64,
    pub max_threads: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreadRecommendation {
    pub threads: u32,
    pub cost: f64,
    /// `(threads, relative cost)` for every candidate.
    pub curve: Vec<(u32, f64)>,
}

/// Minimizes `(fixed + per_vcpu * t) * ((1 - f) / S(t) + f)` over integer `t`
/// in `[1, max_threads]`; the smallest `t` wins ties.
pub fn recommend_threads(
    model: &ScalingModel,
    inputs: &ThreadCostInputs,
) -> Result<ThreadRecommendation, PerfError> {
    let f = inputs.non_align_fraction;
    if !(0.0..1.0).contains(&f) {
        return Err(domain("non_align_fraction outside [0, 1)"));
    }
    if !(inputs.per_vcpu_price >= 0.0) || !(inputs.fixed_overhead_price >= 0.0) {
        return Err(domain("prices must be non-negative"));
    }
    if inputs.max_threads == 0 {
        return Err(domain("max_threads must be at least 1"));
    }
    let mut curve = Vec::with_capacity(inputs.max_threads as usize);
    for t in 1..=inputs.max_threads {
        let tf = f64::from(t);
        let time = (1.0 - f) / model.speedup(tf)? + f;
        curve.push((t, (inputs.fixed_overhead_price + inputs.per_vcpu_price * tf) * time));
    }
    let (threads, cost) = curve
        .iter()
        .copied()
        .reduce(|best, c| match c.1.partial_cmp(&best.1) {
            Some(Ordering::Less) => c,
            _ => best,
        })
        .expect("max_threads >= 1");
    Ok(ThreadRecommendation {
        threads,
        cost,
        curve,
    })
}
