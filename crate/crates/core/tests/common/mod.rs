#![allow(dead_code)]

use hpcledger_core::sim::{run, Actor, ClusterConfig, Event, EventKind, MessageKind, RunOutput};
use hpcledger_core::{SimTime, WorkloadLimit, WorkloadSpec};

pub fn txns(total: u64) -> WorkloadSpec {
    WorkloadSpec { limit: WorkloadLimit::TotalTxns(total), ..WorkloadSpec::default() }
}

pub fn run_ok(cfg: ClusterConfig, wl: WorkloadSpec) -> RunOutput {
    run(cfg, wl).expect("valid config")
}

/// Broadcasts of non-empty proposals, in log order.
pub fn block_proposals(out: &RunOutput) -> Vec<Event> {
    out.log
        .of_kind(EventKind::Send(MessageKind::BlockProposal))
        .filter(|e| out.blocks.iter().any(|b| b.proposed_at == e.time))
        .copied()
        .collect()
}

pub fn proposer(e: &Event) -> u32 {
    match e.from {
        Actor::Node(n) => n,
        other => panic!("proposal from {other}"),
    }
}

pub fn at(us: u64) -> SimTime {
    SimTime::from_micros(us)
}

/// Every live node holds the storage chain.
pub fn live_ledgers_agree(out: &RunOutput) -> bool {
    out.node_ledgers.iter().filter(|l| l.alive).all(|l| l.ledger.verify_chain() && l.ledger.same_chain(&out.storage_ledger))
}
