use std::time::Instant;

use hpcledger_core::metrics::{compare_runs, CompareError, OverheadRow};
use hpcledger_core::sim::{run, ClusterConfig, ConfigError, NodeFault, RunOutput};

use crate::expect::Failure;
use crate::output::SweepPoint;
use crate::scenario::Scenario;

pub struct RunResult {
    pub config: ClusterConfig,
    pub output: RunOutput,
    pub wall_clock_s: f64,
    pub failures: Vec<Failure>,
}

pub fn timed(cfg: ClusterConfig, scenario: &Scenario) -> Result<(RunOutput, f64), ConfigError> {
    let t0 = Instant::now();
    let out = run(cfg, scenario.workload)?;
    Ok((out, t0.elapsed().as_secs_f64()))
}

/// Every run of the scenario, each checked against its expectations.
pub fn run_scenario(scenario: &Scenario) -> Result<Vec<RunResult>, ConfigError> {
    scenario
        .runs()
        .into_iter()
        .map(|cfg| {
            let (output, wall_clock_s) = timed(cfg.clone(), scenario)?;
            let failures = scenario.expect.check(&output);
            Ok(RunResult { config: cfg, output, wall_clock_s, failures })
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Compare(#[from] CompareError),
}

pub struct Overhead {
    pub normal: RunOutput,
    pub forced: RunOutput,
    pub rows: Vec<OverheadRow>,
}

impl Overhead {
    pub fn block_latency_ratio(&self) -> f64 {
        self.rows.iter().find(|r| r.metric == "block_latency_mean_s").map_or(f64::NAN, |r| r.ratio)
    }
}

/// The same cluster and workload with and without storage validation of every block.
pub fn overhead(scenario: &Scenario) -> Result<Overhead, ExperimentError> {
    let normal_cfg = ClusterConfig { force_storage_validation: false, ..scenario.cluster.clone() };
    let forced_cfg = ClusterConfig { force_storage_validation: true, ..scenario.cluster.clone() };
    let normal = run(normal_cfg, scenario.workload)?;
    let forced = run(forced_cfg, scenario.workload)?;
    let rows = compare_runs(&normal.report, &forced.report)?;
    Ok(Overhead { normal, forced, rows })
}

/// Kill 0..=max_failed nodes at start with one storage lookup per suspected
/// node per round; overhead is relative to the run with no failures.
pub fn failure_sweep(scenario: &Scenario, max_failed: u32) -> Result<Vec<SweepPoint>, ConfigError> {
    let n = scenario.cluster.nodes;
    let mut points: Vec<SweepPoint> = Vec::new();
    for k in 0..=max_failed.min(n.saturating_sub(1)) {
        let mut cfg = scenario.cluster.clone();
        cfg.storage_lookup_per_failure = true;
        cfg.fault_plan.kills = (0..k).map(|i| NodeFault::new(n - 1 - i, 0)).collect();
        let out = run(cfg, scenario.workload)?;
        let p50 = out.report.block_latency.p50_s;
        let base = points.first().map_or(p50, |p| p.block_latency_p50_s);
        points.push(SweepPoint {
            failed: k,
            block_latency_p50_s: p50,
            overhead_pct: if base > 0.0 { (p50 / base - 1.0) * 100.0 } else { 0.0 },
            storage_lookups: out.report.storage_lookups,
        });
    }
    Ok(points)
}

pub fn is_nondecreasing(points: &[SweepPoint]) -> bool {
    points.windows(2).all(|w| w[1].overhead_pct >= w[0].overhead_pct)
}
