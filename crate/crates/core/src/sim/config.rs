use alloc::vec::Vec;

use super::event::Actor;
use crate::consensus::DEFAULT_MAX_RETRIES;
use crate::ledger::NodeId;
use crate::pow::{Difficulty, DEFAULT_MINING_GUARD};
use crate::storage::DEFAULT_STORAGE_DIFFICULTY_BITS;
use crate::time::{SimDuration, SimTime};
use crate::txpool::DEFAULT_BLOCK_TXN_THRESHOLD;

pub const DEFAULT_PER_HOP_LATENCY_US: u64 = 100;
pub const DEFAULT_COMPUTE_DIFFICULTY_BITS: u32 = 12;
/// Simulated cost of one SHA-256 evaluation.
pub const DEFAULT_HASH_COST_NS: u64 = 50;
pub const DEFAULT_STORAGE_SERVICE_US: u64 = 1;
pub const DEFAULT_DRAIN_LIMIT_S: u64 = 60;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeFault {
    pub node: NodeId,
    pub at: SimTime,
}

impl NodeFault {
    pub fn new(node: NodeId, at_us: u64) -> Self {
        NodeFault { node, at: SimTime::from_micros(at_us) }
    }
}

/// Scripted crash-stop faults.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub kills: Vec<NodeFault>,
    /// A killed node comes back empty and is repaired from storage.
    pub restarts: Vec<NodeFault>,
    /// The node traps an error while validating its next block.
    pub exceptions: Vec<NodeFault>,
    pub storage_fail_at: Option<SimTime>,
    pub storage_recover_at: Option<SimTime>,
}

impl FaultPlan {
    pub fn is_empty(&self) -> bool {
        self.kills.is_empty() && self.restarts.is_empty() && self.exceptions.is_empty() && self.storage_fail_at.is_none()
    }

    pub fn kill_at(mut self, node: NodeId, at_us: u64) -> Self {
        self.kills.push(NodeFault::new(node, at_us));
        self
    }
}

/// Latency override for one directed link.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkLatency {
    pub from: Actor,
    pub to: Actor,
    pub latency: SimDuration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub nodes: u32,
    pub per_hop_latency: SimDuration,
    pub links: Vec<LinkLatency>,
    pub seed: u64,
    pub fault_plan: FaultPlan,
    pub compute_difficulty: Difficulty,
    pub storage_difficulty: Difficulty,
    pub block_txn_threshold: usize,
    pub max_retries: u32,
    pub hash_cost: SimDuration,
    pub storage_service: SimDuration,
    /// Defaults to twice the per-hop latency.
    pub pop_interval: Option<SimDuration>,
    pub vote_timeout: Option<SimDuration>,
    pub ack_timeout: Option<SimDuration>,
    pub proposal_timeout: Option<SimDuration>,
    pub restart_delay: Option<SimDuration>,
    /// `Some(SimDuration::ZERO)` disables snapshots.
    pub snapshot_interval: Option<SimDuration>,
    /// Upper bound of the random delay between commit and persist.
    pub persist_jitter: Option<SimDuration>,
    pub exit_grace: Option<SimDuration>,
    /// Escalate every round to storage validation.
    pub force_storage_validation: bool,
    /// Each round costs one sequential storage lookup per suspected node.
    pub storage_lookup_per_failure: bool,
    /// Hard stop this long after the last scheduled arrival.
    pub drain_limit: SimDuration,
    pub bucket: SimDuration,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("cluster needs at least one node")]
    NoNodes,
    #[error("per-hop latency must be positive")]
    ZeroLatency,
    #[error("fault plan names node {0}, cluster has {1}")]
    UnknownNode(NodeId, u32),
    #[error("{0} difficulty of {1} bits is above the mining guard")]
    DifficultyTooHigh(&'static str, u32),
    #[error("metrics bucket must be positive")]
    ZeroBucket,
    #[error("workload: {0}")]
    Workload(#[from] crate::workload::WorkloadError),
}

impl ClusterConfig {
    pub fn new(nodes: u32) -> Self {
        ClusterConfig {
            nodes,
            per_hop_latency: SimDuration::from_micros(DEFAULT_PER_HOP_LATENCY_US),
            links: Vec::new(),
            seed: 0,
            fault_plan: FaultPlan::default(),
            compute_difficulty: Difficulty::saturating(DEFAULT_COMPUTE_DIFFICULTY_BITS),
            storage_difficulty: Difficulty::saturating(DEFAULT_STORAGE_DIFFICULTY_BITS),
            block_txn_threshold: DEFAULT_BLOCK_TXN_THRESHOLD,
            max_retries: DEFAULT_MAX_RETRIES,
            hash_cost: SimDuration::from_nanos(DEFAULT_HASH_COST_NS),
            storage_service: SimDuration::from_micros(DEFAULT_STORAGE_SERVICE_US),
            pop_interval: None,
            vote_timeout: None,
            ack_timeout: None,
            proposal_timeout: None,
            restart_delay: None,
            snapshot_interval: None,
            persist_jitter: None,
            exit_grace: None,
            force_storage_validation: false,
            storage_lookup_per_failure: false,
            drain_limit: SimDuration::from_micros(DEFAULT_DRAIN_LIMIT_S * 1_000_000),
            bucket: SimDuration::from_micros(1_000_000),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes == 0 {
            return Err(ConfigError::NoNodes);
        }
        if self.per_hop_latency == SimDuration::ZERO {
            return Err(ConfigError::ZeroLatency);
        }
        if self.bucket == SimDuration::ZERO {
            return Err(ConfigError::ZeroBucket);
        }
        let plan = &self.fault_plan;
        for f in plan.kills.iter().chain(&plan.restarts).chain(&plan.exceptions) {
            if f.node >= self.nodes {
                return Err(ConfigError::UnknownNode(f.node, self.nodes));
            }
        }
        for (name, d) in [("compute", self.compute_difficulty), ("storage", self.storage_difficulty)] {
            if d.bits() > DEFAULT_MINING_GUARD {
                return Err(ConfigError::DifficultyTooHigh(name, d.bits()));
            }
        }
        Ok(())
    }

    fn hop(&self, k: u64) -> SimDuration {
        self.per_hop_latency.saturating_mul(k)
    }

    pub fn pop_interval(&self) -> SimDuration {
        self.pop_interval.unwrap_or(self.hop(2))
    }

    pub fn vote_timeout(&self) -> SimDuration {
        self.vote_timeout.unwrap_or(self.hop(4))
    }

    pub fn ack_timeout(&self) -> SimDuration {
        self.ack_timeout.unwrap_or(self.hop(4))
    }

    /// Four hops plus 32 times the expected mining time plus one pop interval.
    pub fn proposal_timeout(&self) -> SimDuration {
        self.proposal_timeout.unwrap_or_else(|| {
            let attempts = 32u64.saturating_mul(1u64 << self.compute_difficulty.bits().min(40));
            self.hop(4) + self.hash_cost.saturating_mul(attempts) + self.pop_interval()
        })
    }

    pub fn restart_delay(&self) -> SimDuration {
        self.restart_delay.unwrap_or(self.hop(10))
    }

    /// `None` when snapshots are disabled.
    pub fn snapshot_interval(&self) -> Option<SimDuration> {
        match self.snapshot_interval {
            Some(SimDuration::ZERO) => None,
            Some(d) => Some(d),
            None => Some(self.pop_interval().saturating_mul(10)),
        }
    }

    pub fn persist_jitter(&self) -> SimDuration {
        self.persist_jitter.unwrap_or(self.pop_interval().saturating_mul(10))
    }

    pub fn exit_grace(&self) -> SimDuration {
        self.exit_grace.unwrap_or(self.vote_timeout().saturating_mul(2))
    }
}
