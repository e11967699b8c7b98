//! Run metrics and paired-run comparison.

use alloc::vec::Vec;

use crate::time::SimDuration;

/// Mean and nearest-rank percentiles, in simulated seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatencySummary {
    pub samples: u64,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
}

impl LatencySummary {
    pub fn from_nanos(mut values: Vec<u64>) -> Self {
        if values.is_empty() {
            return LatencySummary::default();
        }
        values.sort_unstable();
        let n = values.len();
        let sum: u128 = values.iter().map(|&v| u128::from(v)).sum();
        let rank = |p: u64| values[((p as usize * n).div_ceil(100)).clamp(1, n) - 1] as f64 / 1e9;
        LatencySummary { samples: n as u64, mean_s: sum as f64 / n as f64 / 1e9, p50_s: rank(50), p99_s: rank(99) }
    }
}

/// Alerts per fault-monitor checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MonitorCounts {
    pub message_exchange: u64,
    pub exit_routine: u64,
    pub exception_handler: u64,
}

impl MonitorCounts {
    pub fn total(&self) -> u64 {
        self.message_exchange + self.exit_routine + self.exception_handler
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub nodes: u32,
    pub live_nodes: u32,
    pub workload_fingerprint: u64,
    /// Simulated time of the last event that mattered (last commit or end of workload).
    pub elapsed_s: f64,
    pub txns_generated: u64,
    pub txns_committed: u64,
    pub throughput_tps: f64,
    pub txn_latency: LatencySummary,
    pub block_latency: LatencySummary,
    pub blocks_proposed: u64,
    pub blocks_committed: u64,
    pub blocks_storage_committed: u64,
    pub blocks_failed: u64,
    /// Proposed but undecided when the run stopped; zero after a clean drain.
    pub blocks_pending: u64,
    pub ledger_validity_pct: f64,
    pub storage_accesses: u64,
    pub storage_check_and_inserts: u64,
    pub storage_appends: u64,
    pub storage_validations: u64,
    pub storage_lookups: u64,
    pub storage_repairs: u64,
    pub monitor: MonitorCounts,
    pub restarts: u64,
    pub bucket: SimDuration,
    /// Committed transactions per bucket, by commit time.
    pub timeseries: Vec<u64>,
    /// Buckets lying entirely inside the workload window.
    pub workload_buckets: usize,
}

impl MetricsReport {
    pub fn blocks_conserved(&self) -> bool {
        self.blocks_committed + self.blocks_storage_committed + self.blocks_failed + self.blocks_pending == self.blocks_proposed
    }

    pub fn fraction_committed(&self) -> f64 {
        if self.blocks_proposed == 0 {
            return 1.0;
        }
        (self.blocks_committed + self.blocks_storage_committed) as f64 / self.blocks_proposed as f64
    }

    /// Named scalar metrics, in a fixed order shared by the CSV writer and `compare_runs`.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        alloc::vec![
            ("throughput_tps", self.throughput_tps),
            ("txn_latency_mean_s", self.txn_latency.mean_s),
            ("txn_latency_p50_s", self.txn_latency.p50_s),
            ("txn_latency_p99_s", self.txn_latency.p99_s),
            ("block_latency_mean_s", self.block_latency.mean_s),
            ("block_latency_p50_s", self.block_latency.p50_s),
            ("block_latency_p99_s", self.block_latency.p99_s),
            ("txns_committed", self.txns_committed as f64),
            ("blocks_proposed", self.blocks_proposed as f64),
            ("blocks_committed", self.blocks_committed as f64),
            ("blocks_storage_committed", self.blocks_storage_committed as f64),
            ("blocks_failed", self.blocks_failed as f64),
            ("ledger_validity_pct", self.ledger_validity_pct),
            ("storage_accesses", self.storage_accesses as f64),
            ("storage_validations", self.storage_validations as f64),
            ("monitor_events", self.monitor.total() as f64),
            ("restarts", self.restarts as f64),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverheadRow {
    pub metric: &'static str,
    pub baseline: f64,
    pub candidate: f64,
    /// `candidate / baseline`; 1.0 when both are zero.
    pub ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CompareError {
    #[error("runs used different workloads ({0:#x} vs {1:#x})")]
    WorkloadMismatch(u64, u64),
    #[error("runs used different cluster sizes ({0} vs {1})")]
    ClusterMismatch(u32, u32),
}

pub fn compare_runs(baseline: &MetricsReport, candidate: &MetricsReport) -> Result<Vec<OverheadRow>, CompareError> {
    if baseline.workload_fingerprint != candidate.workload_fingerprint {
        return Err(CompareError::WorkloadMismatch(baseline.workload_fingerprint, candidate.workload_fingerprint));
    }
    if baseline.nodes != candidate.nodes {
        return Err(CompareError::ClusterMismatch(baseline.nodes, candidate.nodes));
    }
    Ok(baseline
        .scalars()
        .into_iter()
        .zip(candidate.scalars())
        .map(|((metric, a), (_, b))| {
            let ratio = if a == b { 1.0 } else { b / a };
            OverheadRow { metric, baseline: a, candidate: b, ratio }
        })
        .collect())
}
