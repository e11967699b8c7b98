//! Scenario files: a TOML document with `[cluster]`, `[workload]`,
//! `[fault_plan]` and `[expect]` sections. Command-line flags override it.

use std::path::Path;

use hpcledger_core::pow::Difficulty;
use hpcledger_core::sim::{Actor, ClusterConfig, LinkLatency, NodeFault};
use hpcledger_core::{SimDuration, SimTime, WorkloadLimit, WorkloadSpec};
use serde::Deserialize;

use crate::expect::Expectations;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing scenario: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("bad fault spec `{0}`; expected <node>@<time_us>")]
    FaultSpec(String),
    #[error("workload needs exactly one of total_txns and duration_s")]
    WorkloadLimit,
    #[error("{0} difficulty {1} is out of range")]
    Difficulty(&'static str, u32),
    #[error("unknown link endpoint `{0}`")]
    Endpoint(String),
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub fault_plan: FaultSection,
    #[serde(default)]
    pub links: Vec<LinkSection>,
    #[serde(default)]
    pub expect: Expectations,
    /// Repeat the run once per listed cluster size.
    #[serde(default)]
    pub sweep_nodes: Vec<u32>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub nodes: Option<u32>,
    pub seed: Option<u64>,
    pub per_hop_latency_us: Option<u64>,
    pub compute_difficulty_bits: Option<u32>,
    pub storage_difficulty_bits: Option<u32>,
    pub block_size: Option<usize>,
    pub max_retries: Option<u32>,
    pub hash_cost_ns: Option<u64>,
    pub storage_service_us: Option<u64>,
    pub snapshot_interval_us: Option<u64>,
    pub persist_jitter_us: Option<u64>,
    pub restart_delay_us: Option<u64>,
    pub force_storage_validation: Option<bool>,
    pub storage_lookup_per_failure: Option<bool>,
    pub drain_limit_s: Option<u64>,
    pub bucket_ms: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub txn_rate_per_node: Option<u32>,
    pub total_txns: Option<u64>,
    pub duration_s: Option<f64>,
    pub amount_min: Option<u64>,
    pub amount_max: Option<u64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    /// `"<node>@<time_us>"` entries.
    #[serde(default)]
    pub kills: Vec<String>,
    #[serde(default)]
    pub restarts: Vec<String>,
    #[serde(default)]
    pub exceptions: Vec<String>,
    pub storage_fail_at_us: Option<u64>,
    pub storage_recover_at_us: Option<u64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub from: String,
    pub to: String,
    pub latency_us: u64,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub nodes: Option<u32>,
    pub seed: Option<u64>,
    pub duration_s: Option<f64>,
    pub total_txns: Option<u64>,
    pub txn_rate: Option<u32>,
    pub block_size: Option<usize>,
    pub compute_difficulty_bits: Option<u32>,
    pub storage_difficulty_bits: Option<u32>,
    pub kills: Option<Vec<String>>,
    pub fail_storage_at_us: Option<u64>,
    pub recover_storage_at_us: Option<u64>,
    pub force_storage_validation: bool,
}

/// A fully resolved, runnable scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub cluster: ClusterConfig,
    pub workload: WorkloadSpec,
    pub expect: Expectations,
    pub sweep_nodes: Vec<u32>,
}

pub const PRESETS: &[(&str, &str)] = &[
    ("faultfree-n8", include_str!("../../../scenarios/faultfree-n8.toml")),
    ("kill4-n20", include_str!("../../../scenarios/kill4-n20.toml")),
    ("scaling-sweep", include_str!("../../../scenarios/scaling-sweep.toml")),
    ("forced-n32", include_str!("../../../scenarios/forced-n32.toml")),
    ("failure-sweep-n24", include_str!("../../../scenarios/failure-sweep-n24.toml")),
];

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    pub fn preset(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| ScenarioError::UnknownPreset(name.to_owned()))?;
        Self::parse(text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        let c = &mut self.cluster;
        c.nodes = o.nodes.or(c.nodes);
        c.seed = o.seed.or(c.seed);
        c.block_size = o.block_size.or(c.block_size);
        c.compute_difficulty_bits = o.compute_difficulty_bits.or(c.compute_difficulty_bits);
        c.storage_difficulty_bits = o.storage_difficulty_bits.or(c.storage_difficulty_bits);
        if o.force_storage_validation {
            c.force_storage_validation = Some(true);
        }
        let w = &mut self.workload;
        w.txn_rate_per_node = o.txn_rate.or(w.txn_rate_per_node);
        if o.duration_s.is_some() {
            w.duration_s = o.duration_s;
            w.total_txns = None;
        }
        if o.total_txns.is_some() {
            w.total_txns = o.total_txns;
            w.duration_s = None;
        }
        if let Some(k) = &o.kills {
            self.fault_plan.kills = k.clone();
        }
        self.fault_plan.storage_fail_at_us = o.fail_storage_at_us.or(self.fault_plan.storage_fail_at_us);
        self.fault_plan.storage_recover_at_us = o.recover_storage_at_us.or(self.fault_plan.storage_recover_at_us);
        if o.nodes.is_some() {
            self.sweep_nodes.clear();
        }
    }

    pub fn resolve(&self) -> Result<Scenario, ScenarioError> {
        let c = &self.cluster;
        let mut cfg = ClusterConfig::new(c.nodes.unwrap_or(8));
        cfg.seed = c.seed.unwrap_or(0);
        if let Some(v) = c.per_hop_latency_us {
            cfg.per_hop_latency = SimDuration::from_micros(v);
        }
        if let Some(b) = c.compute_difficulty_bits {
            cfg.compute_difficulty = Difficulty::new(b).map_err(|_| ScenarioError::Difficulty("compute", b))?;
        }
        if let Some(b) = c.storage_difficulty_bits {
            cfg.storage_difficulty = Difficulty::new(b).map_err(|_| ScenarioError::Difficulty("storage", b))?;
        }
        cfg.block_txn_threshold = c.block_size.unwrap_or(cfg.block_txn_threshold);
        cfg.max_retries = c.max_retries.unwrap_or(cfg.max_retries);
        if let Some(v) = c.hash_cost_ns {
            cfg.hash_cost = SimDuration::from_nanos(v);
        }
        if let Some(v) = c.storage_service_us {
            cfg.storage_service = SimDuration::from_micros(v);
        }
        cfg.snapshot_interval = c.snapshot_interval_us.map(SimDuration::from_micros);
        cfg.persist_jitter = c.persist_jitter_us.map(SimDuration::from_micros);
        cfg.restart_delay = c.restart_delay_us.map(SimDuration::from_micros);
        cfg.force_storage_validation = c.force_storage_validation.unwrap_or(false);
        cfg.storage_lookup_per_failure = c.storage_lookup_per_failure.unwrap_or(false);
        if let Some(s) = c.drain_limit_s {
            cfg.drain_limit = SimDuration::from_micros(s * 1_000_000);
        }
        if let Some(ms) = c.bucket_ms {
            cfg.bucket = SimDuration::from_micros(ms * 1_000);
        }
        let f = &self.fault_plan;
        cfg.fault_plan.kills = parse_faults(&f.kills)?;
        cfg.fault_plan.restarts = parse_faults(&f.restarts)?;
        cfg.fault_plan.exceptions = parse_faults(&f.exceptions)?;
        cfg.fault_plan.storage_fail_at = f.storage_fail_at_us.map(SimTime::from_micros);
        cfg.fault_plan.storage_recover_at = f.storage_recover_at_us.map(SimTime::from_micros);
        cfg.links = self
            .links
            .iter()
            .map(|l| Ok(LinkLatency { from: endpoint(&l.from)?, to: endpoint(&l.to)?, latency: SimDuration::from_micros(l.latency_us) }))
            .collect::<Result<_, ScenarioError>>()?;

        let w = &self.workload;
        let limit = match (w.total_txns, w.duration_s) {
            (Some(n), None) => WorkloadLimit::TotalTxns(n),
            (None, Some(s)) => WorkloadLimit::Duration(SimDuration::from_nanos((s * 1e9).round() as u64)),
            (None, None) => WorkloadSpec::default().limit,
            (Some(_), Some(_)) => return Err(ScenarioError::WorkloadLimit),
        };
        let d = WorkloadSpec::default();
        let workload = WorkloadSpec {
            txn_rate_per_node: w.txn_rate_per_node.unwrap_or(d.txn_rate_per_node),
            limit,
            amount_min: w.amount_min.unwrap_or(d.amount_min),
            amount_max: w.amount_max.unwrap_or(d.amount_max),
            seed: w.seed.unwrap_or(cfg.seed),
        };
        Ok(Scenario { name: self.name.clone(), cluster: cfg, workload, expect: self.expect.clone(), sweep_nodes: self.sweep_nodes.clone() })
    }
}

/// Parses `"3@2000000,7@2000000"` or a single `"3@2000000"`.
pub fn parse_fault_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_owned).collect()
}

fn parse_faults(items: &[String]) -> Result<Vec<NodeFault>, ScenarioError> {
    items
        .iter()
        .map(|s| {
            let (n, t) = s.split_once('@').ok_or_else(|| ScenarioError::FaultSpec(s.clone()))?;
            let node = n.trim().parse().map_err(|_| ScenarioError::FaultSpec(s.clone()))?;
            let at = t.trim().parse().map_err(|_| ScenarioError::FaultSpec(s.clone()))?;
            Ok(NodeFault::new(node, at))
        })
        .collect()
}

fn endpoint(s: &str) -> Result<Actor, ScenarioError> {
    match s {
        "storage" => Ok(Actor::Storage),
        "monitor" => Ok(Actor::Monitor),
        _ => s.strip_prefix('n').and_then(|n| n.parse().ok()).map(Actor::Node).ok_or_else(|| ScenarioError::Endpoint(s.to_owned())),
    }
}

impl Scenario {
    /// One config per run: the sweep sizes, or just the configured one.
    pub fn runs(&self) -> Vec<ClusterConfig> {
        if self.sweep_nodes.is_empty() {
            return vec![self.cluster.clone()];
        }
        self.sweep_nodes
            .iter()
            .map(|&n| ClusterConfig { nodes: n, ..self.cluster.clone() })
            .collect()
    }
}
