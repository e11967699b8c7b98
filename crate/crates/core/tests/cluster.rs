mod common;

use common::*;
use hpcledger_core::sim::{Actor, AlertDetail, Checkpoint, ClusterConfig, EventKind, MessageKind, NodeFault, StopReason};
use hpcledger_core::SimDuration;

#[test]
fn single_node_commits_alone() {
    let out = run_ok(ClusterConfig::new(1), txns(200));
    let r = &out.report;
    assert_eq!(out.stop, StopReason::Quiescent);
    assert_eq!(r.txns_committed, 200);
    assert_eq!(r.blocks_committed, r.blocks_proposed);
    assert_eq!(r.blocks_proposed, 50);
    assert_eq!(r.storage_validations, 0);
    assert_eq!(r.ledger_validity_pct, 100.0);
}

#[test]
fn eight_nodes_hundred_blocks() {
    let mut cfg = ClusterConfig::new(8);
    cfg.block_txn_threshold = 1;
    let out = run_ok(cfg, txns(100));
    let r = &out.report;
    assert_eq!(r.blocks_proposed, 100);
    assert_eq!(r.blocks_committed, 100);
    assert_eq!(r.blocks_storage_committed, 0);
    assert_eq!(r.storage_validations, 0);
    assert_eq!(out.storage_ledger.len(), 101);
    assert!(live_ledgers_agree(&out));
}

#[test]
fn blocks_follow_queue_threshold() {
    // Each node flushes its remainder as one short block at the end.
    let out = run_ok(ClusterConfig::new(8), txns(412));
    let expected: u64 = (0..8u64).map(|n| (412 / 8 + u64::from(n < 412 % 8)).div_ceil(4)).sum();
    assert_eq!(out.report.blocks_proposed, expected);
    assert_eq!(out.report.blocks_committed, expected);
}

#[test]
fn same_seed_same_log() {
    let mut cfg = ClusterConfig::new(6);
    cfg.seed = 31;
    cfg.fault_plan = cfg.fault_plan.kill_at(4, 15_000);
    let wl = txns(300);
    let a = run_ok(cfg.clone(), wl);
    let b = run_ok(cfg.clone(), wl);
    assert_eq!(a.log, b.log);
    assert_eq!(a.report, b.report);
    cfg.seed = 32;
    let c = run_ok(cfg, wl);
    assert_ne!(a.log, c.log);
}

#[test]
fn proposal_fans_out_to_every_other_node() {
    let out = run_ok(ClusterConfig::new(4), txns(40));
    let first = &block_proposals(&out)[0];
    let deliveries = out
        .log
        .of_kind(EventKind::Deliver(MessageKind::BlockProposal))
        .filter(|e| e.from == first.from && e.digest == first.digest)
        .count();
    assert_eq!(deliveries, 3);
}

#[test]
fn dead_receiver_gets_nothing_and_is_reported() {
    let base = run_ok(ClusterConfig::new(4), txns(80));
    let p = block_proposals(&base)[2];
    let victim = (proposer(&p) + 1) % 4;
    let mut cfg = ClusterConfig::new(4);
    cfg.fault_plan = cfg.fault_plan.kill_at(victim, p.time.as_micros());
    let out = run_ok(cfg, txns(80));
    let same = |e: &&hpcledger_core::sim::Event| e.from == p.from && e.digest == p.digest;
    assert_eq!(out.log.of_kind(EventKind::Deliver(MessageKind::BlockProposal)).filter(same).count(), 2);
    assert_eq!(out.log.of_kind(EventKind::Drop(MessageKind::BlockProposal)).filter(same).count(), 1);
    let killed_at = at(p.time.as_micros());
    assert!(out
        .log
        .iter()
        .filter(|e| e.to == Actor::Node(victim) && e.time > killed_at)
        .all(|e| !matches!(e.kind, EventKind::Deliver(_))));
    assert!(out.monitor_events.iter().any(|m| m.checkpoint == Checkpoint::MessageExchange
        && m.subject == Actor::Node(victim)
        && matches!(m.detail, AlertDetail::MissingVote { .. })));
}

#[test]
fn killed_node_fails_exit_check() {
    let mut cfg = ClusterConfig::new(5);
    cfg.fault_plan = cfg.fault_plan.kill_at(2, 30_000);
    let out = run_ok(cfg, txns(200));
    let exits: Vec<_> = out.monitor_events.iter().filter(|m| m.checkpoint == Checkpoint::ExitRoutine).collect();
    assert_eq!(exits.len(), 1);
    assert_eq!(exits[0].subject, Actor::Node(2));
    assert_eq!(out.report.monitor.exit_routine, 1);
}

#[test]
fn healthy_run_raises_nothing() {
    let out = run_ok(ClusterConfig::new(8), txns(400));
    assert!(out.monitor_events.is_empty());
    assert_eq!(out.report.monitor.exception_handler, 0);
    assert_eq!(out.report.restarts, 0);
}

#[test]
fn trapped_exception_escalates_its_block() {
    let mut cfg = ClusterConfig::new(6);
    cfg.fault_plan.exceptions.push(NodeFault::new(3, 20_000));
    let out = run_ok(cfg, txns(240));
    let trapped: Vec<_> = out.monitor_events.iter().filter(|m| m.checkpoint == Checkpoint::ExceptionHandler).collect();
    assert_eq!(trapped.len(), 1);
    assert!(matches!(trapped[0].detail, AlertDetail::Trapped(_)));
    let t = trapped[0].time;
    assert!(out.log.of_kind(EventKind::Escalate).any(|e| e.from == Actor::Node(3) && e.time >= t));
    assert!(out.log.of_kind(EventKind::StorageValidate).any(|e| e.time >= t));
    assert_eq!(out.report.blocks_failed, 0);
    let storage_bits = out.storage_ledger.blocks().iter().filter(|b| b.puzzle_difficulty == 20).count();
    assert_eq!(storage_bits, 1);
    assert!(live_ledgers_agree(&out));
}

#[test]
fn exception_with_storage_down_restarts_round() {
    let mut cfg = ClusterConfig::new(6);
    cfg.fault_plan.exceptions.push(NodeFault::new(3, 20_000));
    cfg.fault_plan.storage_fail_at = Some(at(19_000));
    cfg.fault_plan.storage_recover_at = Some(at(400_000));
    let out = run_ok(cfg, txns(240));
    assert!(out.report.restarts >= 1);
    assert!(out.log.count(EventKind::RoundRestart) >= 1);
    assert!(live_ledgers_agree(&out));
}

#[test]
fn restarted_node_repairs_from_storage() {
    let mut cfg = ClusterConfig::new(5);
    cfg.fault_plan = cfg.fault_plan.kill_at(1, 20_000);
    cfg.fault_plan.restarts.push(NodeFault::new(1, 50_000));
    let out = run_ok(cfg, txns(400));
    assert_eq!(out.log.count(EventKind::NodeRestarted), 1);
    assert!(out.log.count(EventKind::NodeRepaired) >= 1);
    let n1 = &out.node_ledgers[1];
    assert!(n1.alive);
    assert!(n1.ledger.same_chain(&out.storage_ledger));
    assert_eq!(out.report.ledger_validity_pct, 100.0);
    assert_eq!(out.report.live_nodes, 5);
}

#[test]
fn snapshots_save_storage_lookups() {
    let with = run_ok(ClusterConfig::new(8), txns(800));
    let mut cfg = ClusterConfig::new(8);
    cfg.snapshot_interval = Some(SimDuration::ZERO);
    let without = run_ok(cfg, txns(800));
    assert_eq!(without.log.count(EventKind::SnapshotHit), 0);
    assert_eq!(without.log.count(EventKind::SnapshotPublished), 0);
    assert!(with.log.count(EventKind::SnapshotHit) > 0);
    assert!(with.report.storage_check_and_inserts < without.report.storage_check_and_inserts);
    assert_eq!(with.report.storage_appends, without.report.storage_appends);
}

#[test]
fn all_nodes_dead_stops_run() {
    let mut cfg = ClusterConfig::new(2);
    cfg.fault_plan = cfg.fault_plan.kill_at(0, 5_000).kill_at(1, 6_000);
    let out = run_ok(cfg, txns(1_000));
    assert_eq!(out.stop, StopReason::NoLiveNodes);
    assert_eq!(out.report.live_nodes, 0);
}

#[test]
fn rejects_bad_config() {
    assert!(hpcledger_core::sim::run(ClusterConfig::new(0), txns(10)).is_err());
    let mut cfg = ClusterConfig::new(3);
    cfg.fault_plan = cfg.fault_plan.kill_at(7, 0);
    assert!(hpcledger_core::sim::run(cfg, txns(10)).is_err());
}
