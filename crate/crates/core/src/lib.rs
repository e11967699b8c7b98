//! Core of a permissioned ledger for HPC clusters that leans on the
//! cluster's shared storage instead of heavy mining.
//!
//! Everything here is `no_std` with `alloc`: the data model and hashing,
//! proof-of-work, transaction and block queues, the two-phase consensus,
//! the storage protocol, a workload generator, metrics and a deterministic
//! discrete-event simulator of the whole cluster.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod consensus;
pub mod ledger;
pub mod metrics;
pub mod pow;
pub mod sim;
pub mod storage;
pub mod time;
pub mod txpool;
pub mod workload;

pub use consensus::{ConsensusNode, ConsensusOutcome, Vote, VoteTally};
pub use ledger::{Block, BlockHash, Ledger, LedgerRole, NodeId, Transaction};
pub use pow::Difficulty;
pub use storage::SharedStorage;
pub use time::{SimDuration, SimTime};
pub use metrics::MetricsReport;
pub use sim::{run, ClusterConfig, FaultPlan, RunOutput};
pub use workload::{WorkloadLimit, WorkloadSpec};
