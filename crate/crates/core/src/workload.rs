//! Fixed-rate value-transfer workload, one generator per node.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ledger::{NodeId, Transaction};
use crate::time::{SimDuration, SimTime};

pub const DEFAULT_TXN_RATE_PER_NODE: u32 = 900;
pub const DEFAULT_TOTAL_TXNS: u64 = 20_000;
/// Full-scale transaction count; runs never default to it.
pub const FULL_SCALE_TOTAL_TXNS: u64 = 2_013_590;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkloadLimit {
    /// Cluster-wide count, split as evenly as possible across nodes.
    TotalTxns(u64),
    /// Every arrival strictly before this time.
    Duration(SimDuration),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub txn_rate_per_node: u32,
    pub limit: WorkloadLimit,
    pub amount_min: u64,
    pub amount_max: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            txn_rate_per_node: DEFAULT_TXN_RATE_PER_NODE,
            limit: WorkloadLimit::TotalTxns(DEFAULT_TOTAL_TXNS),
            amount_min: 1,
            amount_max: 1_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum WorkloadError {
    #[error("transaction rate must be positive")]
    ZeroRate,
    #[error("amount range {0}..={1} is empty")]
    EmptyAmountRange(u64, u64),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.txn_rate_per_node == 0 {
            return Err(WorkloadError::ZeroRate);
        }
        if self.amount_min > self.amount_max {
            return Err(WorkloadError::EmptyAmountRange(self.amount_min, self.amount_max));
        }
        Ok(())
    }

    /// Time between two arrivals at one node.
    pub fn inter_arrival(&self) -> SimDuration {
        SimDuration::from_nanos(1_000_000_000 / u64::from(self.txn_rate_per_node.max(1)))
    }

    /// Stable fingerprint used to refuse comparing runs of different workloads.
    pub fn fingerprint(&self) -> u64 {
        let (tag, v) = match self.limit {
            WorkloadLimit::TotalTxns(n) => (1u64, n),
            WorkloadLimit::Duration(d) => (2, d.as_nanos()),
        };
        [u64::from(self.txn_rate_per_node), tag, v, self.amount_min, self.amount_max, self.seed]
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, x| (h ^ x).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// Arrival schedule and transaction source of one node.
#[derive(Clone, Debug)]
pub struct TxnGenerator {
    node: NodeId,
    cluster_size: u32,
    spec: WorkloadSpec,
    phase: SimDuration,
    next_seq: u64,
    limit: Option<u64>,
    deadline: Option<SimTime>,
    stopped: bool,
    rng: ChaCha8Rng,
}

impl TxnGenerator {
    pub fn new(spec: WorkloadSpec, node: NodeId, cluster_size: u32) -> Self {
        let n = u64::from(cluster_size.max(1));
        let period = spec.inter_arrival().as_nanos();
        let phase = SimDuration::from_nanos(period * u64::from(node) / n);
        let (limit, deadline) = match spec.limit {
            WorkloadLimit::TotalTxns(total) => {
                let share = total / n + u64::from(u64::from(node) < total % n);
                (Some(share), None)
            }
            WorkloadLimit::Duration(d) => (None, Some(SimTime::ZERO + d)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::from(node) + 1);
        TxnGenerator { node, cluster_size, spec, phase, next_seq: 0, limit, deadline, stopped: false, rng }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn generated(&self) -> u64 {
        self.next_seq
    }

    /// Arrival time of the `seq`-th transaction of this node.
    pub fn arrival_time(&self, seq: u64) -> SimTime {
        SimTime(self.phase.as_nanos() + seq * 1_000_000_000 / u64::from(self.spec.txn_rate_per_node.max(1)))
    }

    /// Next scheduled arrival, or `None` once the workload is exhausted at this node.
    pub fn next_arrival(&self) -> Option<SimTime> {
        if self.stopped || self.limit.is_some_and(|l| self.next_seq >= l) {
            return None;
        }
        let t = self.arrival_time(self.next_seq);
        match self.deadline {
            Some(d) if t >= d => None,
            _ => Some(t),
        }
    }

    /// Arrival time of the last transaction this node will ever generate.
    pub fn last_arrival(&self) -> Option<SimTime> {
        let count = match (self.limit, self.deadline) {
            (Some(l), _) => l,
            (None, Some(d)) => {
                let period = self.spec.inter_arrival().as_nanos().max(1);
                let mut k = d.as_nanos().saturating_sub(self.phase.as_nanos()) / period + 1;
                while k > 0 && self.arrival_time(k - 1) >= d {
                    k -= 1;
                }
                while self.arrival_time(k) < d {
                    k += 1;
                }
                k
            }
            (None, None) => return None,
        };
        count.checked_sub(1).map(|k| self.arrival_time(k))
    }

    pub fn is_exhausted(&self) -> bool {
        self.next_arrival().is_none()
    }

    /// Killed nodes generate nothing further.
    pub fn stop(&mut self) {
        self.stopped = true;
    }

    /// The next transaction, if its arrival time is not after `now`.
    pub fn generate(&mut self, now: SimTime) -> Option<Transaction> {
        if self.next_arrival()? > now {
            return None;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let span = self.cluster_size.max(2);
        let mut receiver = self.rng.random_range(0..span - 1);
        if receiver >= self.node {
            receiver += 1;
        }
        let amount = self.rng.random_range(self.spec.amount_min..=self.spec.amount_max);
        let id = (u64::from(self.node) << 32) | seq;
        Some(Transaction::new(id, self.node, receiver, now.as_micros(), amount))
    }
}
