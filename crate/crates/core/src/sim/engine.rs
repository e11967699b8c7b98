use alloc::collections::{BTreeMap, BinaryHeap};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use super::config::{ClusterConfig, ConfigError};
use super::event::{Actor, Event, EventKind, EventLog, MessageKind};
use super::monitor::{AlertDetail, Checkpoint, Monitor, MonitorEvent};
use super::network::Network;
use super::node::{proposer_for, BlockKey, Proposal, QueuedBlock, RoundState, SimNode, StorageJob};
use crate::consensus::{fallback_outcome, ConsensusOutcome, DeferResult, PersistPlan, Vote, VoteTally};
use crate::ledger::{Block, BlockHash, Ledger, LedgerError, NodeId};
use crate::metrics::{LatencySummary, MetricsReport};
use crate::pow;
use crate::storage::{HashTableSnapshot, PersistOutcome, SharedStorage, StorageStats, ValidateReply};
use crate::time::{SimDuration, SimTime};
use crate::txpool::BlockTemplate;
use crate::workload::{TxnGenerator, WorkloadSpec};

#[derive(Clone, Debug)]
enum Message {
    Proposal(Arc<Proposal>),
    Vote { round: u64, vote: Vote },
    Snapshot(HashTableSnapshot),
    StorageRequest { req_id: u64, job: StorageJob },
    StorageReply { req_id: u64, reply: StorageReply },
    StorageCommit(Arc<Block>),
}

impl Message {
    fn kind(&self) -> MessageKind {
        match self {
            Message::Proposal(_) => MessageKind::BlockProposal,
            Message::Vote { .. } => MessageKind::Vote,
            Message::Snapshot(_) => MessageKind::Snapshot,
            Message::StorageRequest { .. } => MessageKind::StorageRequest,
            Message::StorageReply { .. } => MessageKind::StorageReply,
            Message::StorageCommit(_) => MessageKind::StorageCommit,
        }
    }

    fn digest(&self) -> u64 {
        match self {
            Message::Proposal(p) => p.item.as_ref().map_or(p.round, |q| hash_digest(&q.block)),
            Message::Vote { vote, .. } => vote.block_hash.prefix_u64() ^ u64::from(vote.valid),
            Message::Snapshot(s) => s.len() as u64,
            Message::StorageRequest { job, .. } => job.digest(),
            Message::StorageReply { req_id, .. } => *req_id,
            Message::StorageCommit(b) => hash_digest(b),
        }
    }
}

#[derive(Clone, Debug)]
enum StorageReply {
    Persist,
    Validate(ValidateReply),
    Lookup,
    Repair(Arc<Ledger>),
}

#[derive(Clone, Copy, Debug)]
enum Timer {
    RoundStart(u64),
    TryPropose(u64),
    MiningDone(u64),
    ProposalTimeout(u64),
    VoteTimeout(u64),
    HardenDone(u64),
    PassEnd(u64),
    AckTimeout(u64),
    Pump,
}

#[derive(Clone, Debug)]
enum Action {
    Deliver { from: Actor, to: Actor, msg: Message },
    Timer { node: NodeId, epoch: u32, timer: Timer },
    StorageProcess { from: NodeId, req_id: u64, job: StorageJob },
    SnapshotTick,
    ExitCheck(u64),
    Arrival(NodeId),
    Kill(NodeId),
    Restart(NodeId),
    StorageFail,
    StorageRecover,
}

struct Scheduled {
    time: SimTime,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

fn hash_digest(b: &Block) -> u64 {
    b.hash().map_or(0, |h| h.prefix_u64())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Workload done and every live node drained.
    Quiescent,
    NoLiveNodes,
    /// Drain limit after the last arrival reached.
    HardCap,
    /// Nothing left to simulate.
    Idle,
}

/// Fate of one proposed block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOutcome {
    pub key: BlockKey,
    pub proposed_at: SimTime,
    pub committed_at: Option<SimTime>,
    pub outcome: Option<ConsensusOutcome>,
    pub failed: bool,
    pub txns: u32,
}

#[derive(Clone, Debug)]
pub struct NodeLedger {
    pub node: NodeId,
    pub alive: bool,
    pub ledger: Ledger,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub log: EventLog,
    pub monitor_events: Vec<MonitorEvent>,
    pub storage_ledger: Ledger,
    pub storage_stats: StorageStats,
    pub node_ledgers: Vec<NodeLedger>,
    /// Transactions generated per node.
    pub generated: Vec<u64>,
    pub blocks: Vec<BlockOutcome>,
    pub stop: StopReason,
    pub end_time: SimTime,
}

#[derive(Default)]
struct Tracker {
    by_hash: BTreeMap<BlockHash, BlockKey>,
    records: BTreeMap<BlockKey, BlockOutcome>,
    txn_latencies: Vec<u64>,
    block_latencies: Vec<u64>,
    committed_txns: u64,
    buckets: Vec<u64>,
    last_commit: SimTime,
}

impl Tracker {
    fn alias(&mut self, block: &Block, key: BlockKey) {
        if let Ok(h) = block.hash() {
            self.by_hash.insert(h, key);
        }
    }

    fn proposed(&mut self, key: BlockKey, block: &Block, now: SimTime) {
        self.alias(block, key);
        self.records.entry(key).or_insert(BlockOutcome { key, proposed_at: now, committed_at: None, outcome: None, failed: false, txns: block.txn_counter });
    }

    fn committed(&mut self, block: &Block, outcome: ConsensusOutcome, now: SimTime, bucket: SimDuration) {
        let Some(key) = block.hash().ok().and_then(|h| self.by_hash.get(&h).copied()) else {
            return;
        };
        let Some(rec) = self.records.get_mut(&key) else {
            return;
        };
        if rec.committed_at.is_some() || rec.failed {
            return;
        }
        rec.committed_at = Some(now);
        rec.outcome = Some(outcome);
        self.block_latencies.push(now.saturating_since(rec.proposed_at).as_nanos());
        for t in &block.txn_list {
            self.txn_latencies.push(now.as_nanos().saturating_sub(t.creation_time.saturating_mul(1_000)));
        }
        self.committed_txns += u64::from(block.txn_counter);
        let b = (now.as_nanos() / bucket.as_nanos().max(1)) as usize;
        if self.buckets.len() <= b {
            self.buckets.resize(b + 1, 0);
        }
        self.buckets[b] += u64::from(block.txn_counter);
        self.last_commit = self.last_commit.max(now);
    }

    fn failed(&mut self, key: BlockKey) {
        if let Some(rec) = self.records.get_mut(&key) {
            if rec.committed_at.is_none() {
                rec.failed = true;
            }
        }
    }
}

/// The cluster: compute nodes, one storage actor, the monitor and a virtual clock.
pub struct Simulation {
    cfg: ClusterConfig,
    workload: WorkloadSpec,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    net: Network,
    nodes: Vec<SimNode>,
    gens: Vec<TxnGenerator>,
    storage: SharedStorage,
    storage_busy_until: SimTime,
    monitor: Monitor,
    log: EventLog,
    tracker: Tracker,
    harden_cache: BTreeMap<Vec<u8>, u64>,
    next_req_id: u64,
    workload_end: SimTime,
    hard_cap: SimTime,
    stop: Option<StopReason>,
}

pub fn run(config: ClusterConfig, workload: WorkloadSpec) -> Result<RunOutput, ConfigError> {
    Ok(Simulation::new(config, workload)?.run())
}

impl Simulation {
    pub fn new(cfg: ClusterConfig, workload: WorkloadSpec) -> Result<Self, ConfigError> {
        cfg.validate()?;
        workload.validate()?;
        let n = cfg.nodes;
        let nodes: Vec<SimNode> = (0..n)
            .map(|i| SimNode::new(i, cfg.seed, cfg.compute_difficulty, cfg.max_retries, cfg.block_txn_threshold, cfg.pop_interval()))
            .collect();
        let gens: Vec<TxnGenerator> = (0..n).map(|i| TxnGenerator::new(workload, i, n)).collect();
        let workload_end = gens.iter().filter_map(|g| g.last_arrival()).max().unwrap_or(SimTime::ZERO);
        let mut sim = Simulation {
            net: Network::new(n, cfg.per_hop_latency, &cfg.links),
            storage: SharedStorage::new(cfg.storage_difficulty),
            monitor: Monitor::new(n),
            hard_cap: workload_end + cfg.drain_limit,
            cfg,
            workload,
            now: SimTime::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            gens,
            storage_busy_until: SimTime::ZERO,
            log: EventLog::default(),
            tracker: Tracker::default(),
            harden_cache: BTreeMap::new(),
            next_req_id: 0,
            workload_end,
            stop: None,
        };
        sim.seed_events();
        Ok(sim)
    }

    fn seed_events(&mut self) {
        let plan = self.cfg.fault_plan.clone();
        for f in &plan.kills {
            self.schedule(f.at, Action::Kill(f.node));
        }
        for f in &plan.restarts {
            self.schedule(f.at, Action::Restart(f.node));
        }
        let mut exceptions = plan.exceptions.clone();
        exceptions.sort();
        for f in exceptions {
            self.nodes[f.node as usize].exceptions.push_back(f.at);
        }
        if let Some(t) = plan.storage_fail_at {
            self.schedule(t, Action::StorageFail);
        }
        if let Some(t) = plan.storage_recover_at {
            self.schedule(t, Action::StorageRecover);
        }
        for i in 0..self.cfg.nodes {
            if let Some(t) = self.gens[i as usize].next_arrival() {
                self.schedule(t, Action::Arrival(i));
            }
            self.timer(i, SimTime::ZERO, Timer::RoundStart(0));
        }
        if let Some(iv) = self.cfg.snapshot_interval() {
            self.schedule(SimTime::ZERO + iv, Action::SnapshotTick);
        }
    }

    pub fn run(mut self) -> RunOutput {
        while let Some(s) = self.queue.pop() {
            if s.time > self.hard_cap {
                self.stop = Some(StopReason::HardCap);
                break;
            }
            self.now = s.time;
            self.dispatch(s.action);
            if self.stop.is_some() {
                break;
            }
        }
        let stop = self.stop.unwrap_or(StopReason::Idle);
        self.finish(stop)
    }

    // ---- plumbing ----

    fn schedule(&mut self, time: SimTime, action: Action) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, action });
    }

    fn timer(&mut self, node: NodeId, at: SimTime, timer: Timer) {
        let epoch = self.nodes[node as usize].epoch;
        self.schedule(at, Action::Timer { node, epoch, timer });
    }

    fn record(&mut self, kind: EventKind, from: Actor, to: Actor, digest: u64) {
        self.log.push(Event { time: self.now, kind, from, to, digest });
    }

    fn send_at(&mut self, from: Actor, to: Actor, msg: Message, sent: SimTime) {
        self.record(EventKind::Send(msg.kind()), from, to, msg.digest());
        let at = self.net.delivery_time(from, to, sent);
        self.schedule(at, Action::Deliver { from, to, msg });
    }

    /// Concurrent fan-out to every node except the sender.
    fn broadcast_at(&mut self, from: Actor, msg: Message, sent: SimTime) {
        self.record(EventKind::Send(msg.kind()), from, Actor::Cluster, msg.digest());
        for i in 0..self.cfg.nodes {
            let to = Actor::Node(i);
            if to != from {
                let at = self.net.delivery_time(from, to, sent);
                self.schedule(at, Action::Deliver { from, to, msg: msg.clone() });
            }
        }
    }

    fn alert(&mut self, checkpoint: Checkpoint, subject: Actor, round: u64, detail: AlertDetail, observer: Actor) {
        let ev = MonitorEvent { checkpoint, subject, time: self.now, round, detail };
        if self.monitor.alert(ev) {
            self.record(EventKind::Alert(checkpoint), observer, subject, round);
        }
    }

    fn node(&mut self, n: NodeId) -> &mut SimNode {
        &mut self.nodes[n as usize]
    }

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::Deliver { from, to, msg } => self.deliver(from, to, msg),
            Action::Timer { node, epoch, timer } => {
                let nd = &self.nodes[node as usize];
                if nd.alive && nd.epoch == epoch {
                    self.on_timer(node, timer);
                }
            }
            Action::StorageProcess { from, req_id, job } => self.storage_process(from, req_id, job),
            Action::SnapshotTick => self.snapshot_tick(),
            Action::ExitCheck(round) => {
                for ev in self.monitor.exit_check(round, self.now) {
                    self.record(EventKind::Alert(Checkpoint::ExitRoutine), Actor::Monitor, ev.subject, round);
                }
            }
            Action::Arrival(n) => self.on_arrival(n),
            Action::Kill(n) => self.on_kill(n),
            Action::Restart(n) => self.on_restart(n),
            Action::StorageFail => {
                self.storage.fail();
                self.record(EventKind::StorageFailed, Actor::Storage, Actor::Storage, 0);
            }
            Action::StorageRecover => {
                self.storage.recover();
                self.record(EventKind::StorageRecovered, Actor::Storage, Actor::Storage, 0);
            }
        }
    }

    fn deliver(&mut self, from: Actor, to: Actor, msg: Message) {
        let kind = msg.kind();
        let digest = msg.digest();
        match to {
            Actor::Node(n) => {
                if !self.nodes[n as usize].alive {
                    self.record(EventKind::Drop(kind), from, to, digest);
                    return;
                }
                self.record(EventKind::Deliver(kind), from, to, digest);
                match msg {
                    Message::Proposal(p) => self.on_proposal(n, &p),
                    Message::Vote { round, vote } => self.on_vote(n, round, vote),
                    Message::Snapshot(s) => {
                        let nd = self.node(n);
                        if s.taken_at() >= nd.core.snapshot().taken_at() {
                            nd.core.install_snapshot(s);
                        }
                    }
                    Message::StorageReply { req_id, reply } => self.on_storage_reply(n, req_id, reply),
                    Message::StorageCommit(b) => self.on_storage_commit(n, &b),
                    Message::StorageRequest { .. } => {}
                }
            }
            Actor::Storage => {
                let (Message::StorageRequest { req_id, job }, Actor::Node(src)) = (msg, from) else {
                    return;
                };
                if self.storage.is_failed() {
                    self.record(EventKind::Drop(kind), from, to, digest);
                    return;
                }
                self.record(EventKind::Deliver(kind), from, to, digest);
                let at = self.now.max(self.storage_busy_until) + self.cfg.storage_service;
                self.storage_busy_until = at;
                self.schedule(at, Action::StorageProcess { from: src, req_id, job });
            }
            Actor::Monitor | Actor::Cluster => {}
        }
    }

    // ---- workload and faults ----

    fn on_arrival(&mut self, n: NodeId) {
        if !self.nodes[n as usize].alive {
            return;
        }
        let now = self.now;
        if let Some(txn) = self.gens[n as usize].generate(now) {
            self.record(EventKind::TxnCreated, Actor::Node(n), Actor::Node(txn.receiver_id), txn.txn_id);
            let tpl = self.template(n);
            if let Some(block) = self.node(n).txq.submit_txn(txn, tpl) {
                self.enqueue_created(n, block);
            }
        }
        match self.gens[n as usize].next_arrival() {
            Some(t) => self.schedule(t, Action::Arrival(n)),
            None => {
                let tpl = self.template(n);
                if let Some(block) = self.node(n).txq.flush(tpl) {
                    self.enqueue_created(n, block);
                }
            }
        }
    }

    fn template(&self, n: NodeId) -> BlockTemplate {
        BlockTemplate::on_tip(self.nodes[n as usize].core.ledger(), self.now.as_micros(), self.cfg.compute_difficulty)
    }

    fn enqueue_created(&mut self, n: NodeId, block: Block) {
        let nd = self.node(n);
        let key = (u64::from(n) << 32) | u64::from(nd.next_block_seq);
        nd.next_block_seq += 1;
        nd.queues.push_outgoing(QueuedBlock { key, block, round: 0, retry: 0 });
        self.record(EventKind::BlockCreated, Actor::Node(n), Actor::Node(n), key);
    }

    fn on_kill(&mut self, n: NodeId) {
        let nd = self.node(n);
        if !nd.alive {
            return;
        }
        nd.alive = false;
        nd.epoch += 1;
        self.gens[n as usize].stop();
        self.record(EventKind::NodeKilled, Actor::Node(n), Actor::Node(n), 0);
        let now = self.now;
        let pending_restart = self.cfg.fault_plan.restarts.iter().any(|r| r.at > now);
        if !pending_restart && self.nodes.iter().all(|x| !x.alive) {
            self.stop = Some(StopReason::NoLiveNodes);
        }
    }

    fn on_restart(&mut self, n: NodeId) {
        let nd = self.node(n);
        if nd.alive {
            return;
        }
        nd.alive = true;
        nd.epoch += 1;
        nd.wipe();
        nd.awaiting_sync = true;
        nd.repairing = true;
        nd.chan.outbox.push_back(StorageJob::Repair);
        self.record(EventKind::NodeRestarted, Actor::Node(n), Actor::Node(n), 0);
        self.pump(n);
    }

    // ---- rounds ----

    fn on_timer(&mut self, n: NodeId, timer: Timer) {
        let now = self.now;
        match timer {
            Timer::RoundStart(r) => self.start_round(n, r),
            Timer::TryPropose(r) => self.try_propose(n, r),
            Timer::MiningDone(r) => self.mining_done(n, r),
            Timer::ProposalTimeout(r) => {
                let nd = &self.nodes[n as usize];
                if nd.round == r && nd.in_round && !nd.proposal_seen && nd.current.is_none() {
                    let p = proposer_for(r, self.cfg.nodes, &nd.suspects);
                    self.alert(Checkpoint::MessageExchange, Actor::Node(p), r, AlertDetail::MissingProposal { observer: n }, Actor::Node(n));
                    self.node(n).suspects.insert(p);
                    self.finish_round(n, now);
                }
            }
            Timer::VoteTimeout(r) => {
                let nd = &self.nodes[n as usize];
                if nd.round == r && nd.current.as_ref().is_some_and(|c| !c.decided) {
                    self.decide(n);
                }
            }
            Timer::HardenDone(r) => self.harden_done(n, r),
            Timer::PassEnd(r) => {
                let nd = &self.nodes[n as usize];
                if nd.round == r && nd.in_round && nd.current.is_none() {
                    self.finish_round(n, now);
                }
            }
            Timer::AckTimeout(req_id) => self.ack_timeout(n, req_id),
            Timer::Pump => {
                self.node(n).chan.wake = None;
                self.pump(n);
            }
        }
    }

    fn start_round(&mut self, n: NodeId, r: u64) {
        let now = self.now;
        let nodes = self.cfg.nodes;
        let timeout = self.cfg.proposal_timeout();
        let nd = self.node(n);
        if nd.awaiting_sync {
            return;
        }
        nd.round = r;
        nd.in_round = true;
        nd.proposal_seen = false;
        nd.voted.clear();
        nd.future_votes = nd.future_votes.split_off(&r);
        nd.future_passes = nd.future_passes.split_off(&r);
        if proposer_for(r, nodes, &nd.suspects) == n {
            self.timer(n, now, Timer::TryPropose(r));
        } else {
            self.timer(n, now + timeout, Timer::ProposalTimeout(r));
        }
        if self.node(n).future_passes.remove(&r) {
            self.on_pass(n);
            return;
        }
        self.try_validate(n);
    }

    fn try_propose(&mut self, n: NodeId, r: u64) {
        let now = self.now;
        let nd = self.node(n);
        if nd.round != r || !nd.in_round || nd.proposal_seen || nd.proposing.is_some() {
            return;
        }
        let item = match nd.core.waiting_mut().pop() {
            Some((mut qb, retry)) => {
                qb.retry = retry;
                Some(qb)
            }
            None => match nd.queues.pop_outgoing(now) {
                Some(qb) => Some(qb),
                None if nd.queues.outgoing_len() > 0 => {
                    let at = nd.queues.next_pop_at();
                    self.timer(n, at, Timer::TryPropose(r));
                    return;
                }
                None => None,
            },
        };
        let Some(mut qb) = item else {
            self.propose_pass(n, r);
            return;
        };
        let (tip, next) = (nd.core.ledger().tip_hash(), nd.core.ledger().next_block_id());
        let mut attempts = 0;
        if qb.block.parent_block_hash != tip || qb.block.block_id != next || !qb.block.pow_valid() {
            qb.block.parent_block_hash = tip;
            qb.block.block_id = next;
            let pre = qb.block.canonical_bytes().unwrap_or_default();
            let nonce = pow::mine(&pre, self.cfg.compute_difficulty, 0).map_or(u64::MAX, |p| p.nonce);
            qb.block.mined_nonce = nonce;
            attempts = nonce.saturating_add(1);
        }
        qb.round = r;
        let cost = self.cfg.hash_cost.saturating_mul(attempts);
        self.node(n).proposing = Some(qb);
        self.timer(n, now + cost, Timer::MiningDone(r));
    }

    fn propose_pass(&mut self, n: NodeId, r: u64) {
        let now = self.now;
        let suspects = self.nodes[n as usize].suspects.iter().copied().collect();
        let height = self.nodes[n as usize].core.ledger().next_block_id();
        let p = Proposal { round: r, proposer: n, item: None, suspects, height };
        self.node(n).proposal_seen = true;
        self.broadcast_at(Actor::Node(n), Message::Proposal(Arc::new(p)), now);
        if self.quiescent() {
            self.stop = Some(StopReason::Quiescent);
            return;
        }
        let l = self.cfg.per_hop_latency;
        self.timer(n, now + l, Timer::PassEnd(r));
    }

    fn mining_done(&mut self, n: NodeId, r: u64) {
        let now = self.now;
        let nd = self.node(n);
        let Some(qb) = nd.proposing.take() else {
            return;
        };
        if nd.round != r {
            let retry = qb.retry;
            nd.core.waiting_mut().defer(qb, retry.saturating_sub(1));
            return;
        }
        nd.proposal_seen = true;
        let suspects = nd.suspects.iter().copied().collect();
        let height = nd.core.ledger().next_block_id();
        nd.queues.push_incoming(qb.clone());
        self.tracker.proposed(qb.key, &qb.block, now);
        let p = Proposal { round: r, proposer: n, item: Some(qb), suspects, height };
        self.broadcast_at(Actor::Node(n), Message::Proposal(Arc::new(p)), now);
        self.try_validate(n);
    }

    fn on_proposal(&mut self, n: NodeId, p: &Proposal) {
        let nd = self.node(n);
        if nd.awaiting_sync {
            if nd.repairing {
                return;
            }
            nd.awaiting_sync = false;
            nd.suspects = p.suspects.iter().copied().filter(|&s| s != n).collect();
            self.start_round(n, p.round);
        }
        let nd = self.node(n);
        if p.round < nd.round {
            return;
        }
        if p.round == nd.round && nd.in_round && nd.current.is_none() && !nd.repairing && p.height > nd.core.ledger().next_block_id() {
            self.request_repair(n);
        }
        let nd = self.node(n);
        match &p.item {
            None => {
                if p.round == nd.round && nd.in_round && nd.current.is_none() {
                    nd.proposal_seen = true;
                    self.on_pass(n);
                } else if p.round > nd.round || !nd.in_round {
                    nd.future_passes.insert(p.round);
                }
            }
            Some(item) => {
                nd.queues.push_incoming(item.clone());
                self.try_validate(n);
            }
        }
    }

    fn on_pass(&mut self, n: NodeId) {
        let now = self.now;
        self.finish_round(n, now);
    }

    fn try_validate(&mut self, n: NodeId) {
        let now = self.now;
        let nodes = self.cfg.nodes;
        let nd = self.node(n);
        if nd.current.is_some() || !nd.in_round || nd.awaiting_sync {
            return;
        }
        loop {
            match nd.queues.peek_incoming() {
                None => return,
                Some(h) if h.round < nd.round => {
                    let _ = nd.queues.next_incoming();
                    nd.queues.finish_validation();
                }
                Some(h) if h.round > nd.round => return,
                Some(_) => break,
            }
        }
        let Ok(Some(mut qb)) = nd.queues.next_incoming() else {
            return;
        };
        let r = nd.round;
        nd.proposal_seen = true;
        if qb.retry > 0 {
            let key = qb.key;
            nd.core.waiting_mut().take_where(|w| w.key == key);
        }
        qb.block.mark_received(now.as_micros());
        let trapped = nd.exceptions.front().is_some_and(|&t| t <= now);
        if trapped {
            nd.exceptions.pop_front();
            nd.suspects.insert(n);
        }
        let hash = qb.block.hash().unwrap_or(BlockHash::ZERO);
        let expected = (0..nodes).filter(|i| !nd.suspects.contains(i)).collect();
        let mut tally = VoteTally::new(hash, nodes);
        let mut own_vote = None;
        if !trapped {
            let vote = nd.core.validate_local(&qb.block);
            tally.record(&vote);
            nd.voted.insert(n);
            own_vote = Some(vote);
        }
        let block_for_trap = trapped.then(|| qb.block.clone());
        nd.current = Some(RoundState { item: qb, tally, expected, trapped, decided: false, escalate: false, hardened: None, lookups_left: 0 });
        let buffered = nd.future_votes.remove(&r).unwrap_or_default();
        if let Some(b) = block_for_trap {
            let err = corrupted_parse(&b);
            self.monitor.trap_exception(n, r, now, err);
            self.record(EventKind::Alert(Checkpoint::ExceptionHandler), Actor::Node(n), Actor::Node(n), r);
        }
        if let Some(vote) = own_vote {
            let sent = now + self.cfg.hash_cost;
            self.broadcast_at(Actor::Node(n), Message::Vote { round: r, vote }, sent);
        }
        let mut vt = self.cfg.vote_timeout();
        if self.cfg.storage_lookup_per_failure {
            // Voters finish the previous round's lookups before they can vote.
            let k = self.nodes[n as usize].suspects.iter().filter(|&&s| s != n).count() as u64;
            vt = vt + self.cfg.ack_timeout().saturating_mul(k);
        }
        self.timer(n, now + vt, Timer::VoteTimeout(r));
        let nd = self.node(n);
        if let Some(cur) = nd.current.as_mut() {
            for v in &buffered {
                cur.tally.record(v);
                nd.voted.insert(v.voter);
            }
        }
        self.check_decide(n);
    }

    fn on_vote(&mut self, n: NodeId, round: u64, vote: Vote) {
        let nd = self.node(n);
        if nd.awaiting_sync || round < nd.round {
            return;
        }
        if round > nd.round || nd.current.is_none() {
            nd.future_votes.entry(round).or_default().push(vote);
            return;
        }
        let Some(cur) = nd.current.as_mut() else {
            return;
        };
        if cur.decided {
            return;
        }
        cur.tally.record(&vote);
        nd.voted.insert(vote.voter);
        self.check_decide(n);
    }

    fn check_decide(&mut self, n: NodeId) {
        let ready = self.nodes[n as usize]
            .current
            .as_ref()
            .is_some_and(|c| !c.decided && c.expected.iter().all(|&e| c.tally.has_responded(e)));
        if ready {
            self.decide(n);
        }
    }

    fn decide(&mut self, n: NodeId) {
        let force = self.cfg.force_storage_validation;
        let per_failure = self.cfg.storage_lookup_per_failure;
        let nd = self.node(n);
        let r = nd.round;
        let Some(cur) = nd.current.as_mut() else {
            return;
        };
        cur.decided = true;
        let missing: Vec<NodeId> = cur.expected.iter().copied().filter(|&e| !cur.tally.has_responded(e)).collect();
        let alerted = !missing.is_empty() || cur.trapped;
        cur.escalate = !cur.tally.has_majority() || alerted || force;
        let escalate = cur.escalate;
        let hash = cur.tally.block_hash();
        for &m in &missing {
            nd.suspects.insert(m);
        }
        let lookups = if per_failure { nd.suspects.iter().filter(|&&s| s != n).count() as u32 } else { 0 };
        for m in missing {
            self.alert(Checkpoint::MessageExchange, Actor::Node(m), r, AlertDetail::MissingVote { observer: n }, Actor::Node(n));
        }
        if escalate {
            self.record(EventKind::Escalate, Actor::Node(n), Actor::Storage, hash.prefix_u64());
        }
        if lookups > 0 {
            let nd = self.node(n);
            if let Some(cur) = nd.current.as_mut() {
                cur.lookups_left = lookups;
            }
            for _ in 0..lookups {
                nd.chan.outbox.push_back(StorageJob::Lookup { hash, round: r });
            }
            self.pump(n);
            return;
        }
        self.proceed(n);
    }

    fn proceed(&mut self, n: NodeId) {
        let now = self.now;
        let Some(cur) = self.nodes[n as usize].current.as_ref() else {
            return;
        };
        let r = self.nodes[n as usize].round;
        if !cur.escalate {
            let block = cur.item.block.clone();
            self.record(EventKind::Decide(ConsensusOutcome::Committed), Actor::Node(n), Actor::Node(n), hash_digest(&block));
            self.do_commit(n, block, ConsensusOutcome::Committed, ConsensusOutcome::Committed);
            self.finish_round(n, now);
            return;
        }
        let (key, block) = (cur.item.key, cur.item.block.clone());
        let (hardened, attempts) = self.harden(&block);
        self.tracker.alias(&hardened, key);
        if let Some(cur) = self.node(n).current.as_mut() {
            cur.hardened = Some(hardened);
        }
        let cost = self.cfg.hash_cost.saturating_mul(attempts);
        self.timer(n, now + cost, Timer::HardenDone(r));
    }

    /// The same block re-mined at storage difficulty. Every escalating node
    /// is charged the mining time; the search itself runs once.
    fn harden(&mut self, block: &Block) -> (Block, u64) {
        let mut h = block.clone();
        h.puzzle_difficulty = self.cfg.storage_difficulty.bits();
        let pre = h.canonical_bytes().unwrap_or_default();
        let d = self.cfg.storage_difficulty;
        let nonce = *self.harden_cache.entry(pre).or_insert_with_key(|pre| pow::mine(pre, d, 0).map_or(u64::MAX, |p| p.nonce));
        h.mined_nonce = nonce;
        (h, nonce.saturating_add(1))
    }

    fn harden_done(&mut self, n: NodeId, r: u64) {
        let now = self.now;
        let nd = self.node(n);
        if nd.round != r {
            return;
        }
        let Some(block) = nd.current.as_ref().and_then(|c| c.hardened.clone()) else {
            return;
        };
        for job in nd.chan.outbox.iter_mut() {
            if let StorageJob::Persist { due, .. } = job {
                *due = (*due).min(now);
            }
        }
        nd.chan.last_due = nd.chan.last_due.min(now);
        nd.chan.outbox.push_back(StorageJob::Validate { block, round: r });
        self.pump(n);
    }

    fn on_validate_reply(&mut self, n: NodeId, round: u64, reply: ValidateReply) {
        let now = self.now;
        let nd = self.node(n);
        if nd.round != round {
            return;
        }
        let Some(cur) = nd.current.as_mut() else {
            return;
        };
        let stored = reply.is_stored();
        let outcome = fallback_outcome(&mut cur.tally, stored);
        let (item, hardened) = (cur.item.clone(), cur.hardened.clone());
        self.record(EventKind::Decide(outcome), Actor::Node(n), Actor::Node(n), hash_digest(&item.block));
        match (outcome, hardened) {
            (ConsensusOutcome::Deferred, _) => self.defer(n, item),
            (_, Some(h)) if stored => self.do_commit(n, h, outcome, ConsensusOutcome::StorageCommitted),
            _ => self.do_commit(n, item.block, outcome, ConsensusOutcome::Committed),
        }
        self.finish_round(n, now);
    }

    fn defer(&mut self, n: NodeId, item: QueuedBlock) {
        let key = item.key;
        let retry = item.retry;
        match self.node(n).core.defer(item, retry) {
            DeferResult::Queued { .. } => self.record(EventKind::Defer, Actor::Node(n), Actor::Node(n), key),
            DeferResult::Dropped { .. } => {
                self.record(EventKind::BlockFailed, Actor::Node(n), Actor::Node(n), key);
                self.tracker.failed(key);
            }
        }
    }

    /// `outcome` is what the round decided; `local` tells the node whether
    /// storage already holds this exact block.
    fn do_commit(&mut self, n: NodeId, block: Block, outcome: ConsensusOutcome, local: ConsensusOutcome) {
        let now = self.now;
        let jitter = self.cfg.persist_jitter().as_nanos();
        let bucket = self.cfg.bucket;
        let nd = self.node(n);
        let hash = block.hash().unwrap_or(BlockHash::ZERO);
        if nd.core.ledger().contains(&hash) {
            return;
        }
        match nd.core.commit(block.clone(), local) {
            Ok(receipt) => {
                if receipt.persist == PersistPlan::Request {
                    let delay = if jitter > 0 { nd.rng.random_range(0..=jitter) } else { 0 };
                    let due = (now + SimDuration::from_nanos(delay)).max(nd.chan.last_due);
                    nd.chan.last_due = due;
                    nd.chan.outbox.push_back(StorageJob::Persist { block: block.clone(), due });
                    self.record(EventKind::PersistQueued, Actor::Node(n), Actor::Storage, hash.prefix_u64());
                }
                self.record(EventKind::Commit, Actor::Node(n), Actor::Node(n), hash.prefix_u64());
                self.tracker.committed(&block, outcome, now, bucket);
                self.pump(n);
            }
            Err(_) => {
                self.record(EventKind::AppendFailed, Actor::Node(n), Actor::Node(n), hash.prefix_u64());
                self.request_repair(n);
            }
        }
    }

    fn request_repair(&mut self, n: NodeId) {
        let nd = self.node(n);
        if !nd.repairing {
            nd.repairing = true;
            nd.chan.outbox.push_back(StorageJob::Repair);
            self.pump(n);
        }
    }

    fn finish_round(&mut self, n: NodeId, now: SimTime) {
        let grace = self.cfg.exit_grace();
        let nd = self.node(n);
        let r = nd.round;
        let voted = core::mem::take(&mut nd.voted);
        for v in voted {
            if v != n || nd.current.as_ref().is_some_and(|c| !c.trapped) {
                nd.suspects.remove(&v);
            }
        }
        nd.current = None;
        nd.queues.finish_validation();
        nd.in_round = false;
        nd.round = r + 1;
        if self.monitor.post_completion(n, r) {
            self.schedule(now + grace, Action::ExitCheck(r));
        }
        self.timer(n, now, Timer::RoundStart(r + 1));
    }

    fn restart_round(&mut self, n: NodeId) {
        let now = self.now;
        let delay = self.cfg.restart_delay();
        let r = self.nodes[n as usize].round;
        if self.monitor.note_restart(r) {
            self.record(EventKind::RoundRestart, Actor::Monitor, Actor::Cluster, r);
        }
        let nd = self.node(n);
        nd.chan.outbox.retain(|j| !j.blocks_round());
        if let Some(cur) = nd.current.take() {
            self.defer(n, cur.item);
        }
        let nd = self.node(n);
        let voted = core::mem::take(&mut nd.voted);
        for v in voted {
            nd.suspects.remove(&v);
        }
        nd.queues.finish_validation();
        nd.in_round = false;
        nd.round = r + 1;
        if self.monitor.post_completion(n, r) {
            let grace = self.cfg.exit_grace();
            self.schedule(now + grace, Action::ExitCheck(r));
        }
        self.timer(n, now + delay, Timer::RoundStart(r + 1));
    }

    fn on_storage_commit(&mut self, n: NodeId, block: &Block) {
        let nd = &self.nodes[n as usize];
        if nd.awaiting_sync || nd.repairing {
            return;
        }
        let ledger = nd.core.ledger();
        let Ok(hash) = block.hash() else {
            return;
        };
        if ledger.contains(&hash) {
            return;
        }
        let in_escalation = nd.current.as_ref().is_some_and(|c| c.hardened.as_ref().is_some_and(|h| h.hash().ok() == Some(hash)));
        if in_escalation {
            // The node's own storage reply will commit it.
            return;
        }
        if ledger.check_successor(block).is_ok() {
            self.do_commit(n, block.clone(), ConsensusOutcome::StorageCommitted, ConsensusOutcome::StorageCommitted);
        } else if block.block_id >= ledger.next_block_id() || ledger.blocks().get(block.block_id as usize).is_some() {
            self.request_repair(n);
        }
    }

    // ---- storage channel ----

    fn pump(&mut self, n: NodeId) {
        let now = self.now;
        loop {
            let nd = self.node(n);
            if nd.chan.in_flight.is_some() {
                return;
            }
            if now < nd.chan.hold_until {
                let t = nd.chan.hold_until;
                self.wake(n, t);
                return;
            }
            let Some(head) = nd.chan.outbox.front() else {
                return;
            };
            if let StorageJob::Persist { block, due } = head {
                if *due > now {
                    // Lookups are reads and need not wait for writes that are not due.
                    if let Some(i) = nd.chan.outbox.iter().position(|j| matches!(j, StorageJob::Lookup { .. })) {
                        if let Some(job) = nd.chan.outbox.remove(i) {
                            self.send_job(n, job);
                        }
                        return;
                    }
                    let t = *due;
                    self.wake(n, t);
                    return;
                }
                let hash = block.hash().unwrap_or(BlockHash::ZERO);
                if nd.core.snapshot().contains(&hash) {
                    nd.chan.outbox.pop_front();
                    self.record(EventKind::SnapshotHit, Actor::Node(n), Actor::Node(n), hash.prefix_u64());
                    continue;
                }
            }
            if let Some(job) = nd.chan.outbox.pop_front() {
                self.send_job(n, job);
            }
            return;
        }
    }

    fn send_job(&mut self, n: NodeId, job: StorageJob) {
        let now = self.now;
        let req_id = self.next_req_id;
        self.next_req_id += 1;
        self.node(n).chan.in_flight = Some((req_id, job.clone()));
        self.send_at(Actor::Node(n), Actor::Storage, Message::StorageRequest { req_id, job }, now);
        let ack = self.cfg.ack_timeout();
        self.timer(n, now + ack, Timer::AckTimeout(req_id));
    }

    fn wake(&mut self, n: NodeId, at: SimTime) {
        let nd = self.node(n);
        if nd.chan.wake.is_some_and(|w| w <= at) {
            return;
        }
        nd.chan.wake = Some(at);
        self.timer(n, at, Timer::Pump);
    }

    fn ack_timeout(&mut self, n: NodeId, req_id: u64) {
        let now = self.now;
        let delay = self.cfg.restart_delay();
        let nd = self.node(n);
        if nd.chan.in_flight.as_ref().map(|x| x.0) != Some(req_id) {
            return;
        }
        let Some((_, job)) = nd.chan.in_flight.take() else {
            return;
        };
        let r = nd.round;
        self.record(EventKind::AckTimeout, Actor::Node(n), Actor::Storage, job.digest());
        self.alert(Checkpoint::MessageExchange, Actor::Storage, r, AlertDetail::AckTimeout { observer: n }, Actor::Node(n));
        let nd = self.node(n);
        match job {
            StorageJob::Validate { .. } | StorageJob::Lookup { .. } => self.restart_round(n),
            StorageJob::Persist { .. } | StorageJob::Repair => {
                let blocked = nd.chan.outbox.iter().any(StorageJob::blocks_round);
                nd.chan.outbox.push_front(job);
                nd.chan.hold_until = now + delay;
                if blocked {
                    self.restart_round(n);
                }
                self.pump(n);
            }
        }
    }

    fn on_storage_reply(&mut self, n: NodeId, req_id: u64, reply: StorageReply) {
        let nd = self.node(n);
        if nd.chan.in_flight.as_ref().map(|x| x.0) != Some(req_id) {
            return;
        }
        let Some((_, job)) = nd.chan.in_flight.take() else {
            return;
        };
        match (job, reply) {
            (StorageJob::Validate { round, .. }, StorageReply::Validate(v)) => self.on_validate_reply(n, round, v),
            (StorageJob::Lookup { round, .. }, StorageReply::Lookup) => {
                let nd = self.node(n);
                if nd.round == round {
                    if let Some(cur) = nd.current.as_mut() {
                        cur.lookups_left = cur.lookups_left.saturating_sub(1);
                        if cur.lookups_left == 0 {
                            self.proceed(n);
                        }
                    }
                }
            }
            (StorageJob::Repair, StorageReply::Repair(ledger)) => {
                let nd = self.node(n);
                if nd.core.is_inconsistent() || ledger.len() > nd.core.ledger().len() {
                    nd.core.repair((*ledger).clone());
                }
                nd.repairing = false;
                self.record(EventKind::NodeRepaired, Actor::Node(n), Actor::Node(n), ledger.len() as u64);
            }
            _ => {}
        }
        self.pump(n);
    }

    fn storage_process(&mut self, from: NodeId, req_id: u64, job: StorageJob) {
        let src = Actor::Node(from);
        if self.storage.is_failed() {
            self.record(EventKind::Drop(MessageKind::StorageRequest), src, Actor::Storage, job.digest());
            return;
        }
        let now = self.now;
        let reply = match &job {
            StorageJob::Persist { block, .. } => {
                let r = self.storage.check_and_insert(block);
                let d = hash_digest(block);
                self.record(EventKind::CheckAndInsert, src, Actor::Storage, d);
                match r {
                    Ok(PersistOutcome::Persisted) => self.record(EventKind::StorageAppend, Actor::Storage, Actor::Storage, d),
                    Ok(PersistOutcome::Duplicate) => self.record(EventKind::StorageDuplicate, src, Actor::Storage, d),
                    Err(_) => {}
                }
                StorageReply::Persist
            }
            StorageJob::Validate { block, .. } => {
                let d = hash_digest(block);
                let v = self.storage.validate_once(block).unwrap_or(ValidateReply::Rejected);
                match v {
                    ValidateReply::AlreadyStored => self.record(EventKind::StorageDuplicate, src, Actor::Storage, d),
                    ValidateReply::Accepted => {
                        self.record(EventKind::StorageValidate, src, Actor::Storage, d);
                        self.record(EventKind::StorageAppend, Actor::Storage, Actor::Storage, d);
                    }
                    ValidateReply::Rejected => self.record(EventKind::StorageValidate, src, Actor::Storage, d),
                }
                StorageReply::Validate(v)
            }
            StorageJob::Lookup { hash, .. } => {
                let _ = self.storage.lookup(hash);
                self.record(EventKind::StorageLookup, src, Actor::Storage, hash.prefix_u64());
                StorageReply::Lookup
            }
            StorageJob::Repair => match self.storage.repair_node(from) {
                Ok(l) => {
                    self.record(EventKind::StorageRepair, src, Actor::Storage, l.len() as u64);
                    StorageReply::Repair(Arc::new(l))
                }
                Err(_) => return,
            },
        };
        let accepted = match (&job, &reply) {
            (StorageJob::Validate { block, .. }, StorageReply::Validate(ValidateReply::Accepted)) => Some(block.clone()),
            _ => None,
        };
        self.send_at(Actor::Storage, src, Message::StorageReply { req_id, reply }, now);
        if let Some(b) = accepted {
            self.broadcast_at(Actor::Storage, Message::StorageCommit(Arc::new(b)), now);
        }
    }

    fn snapshot_tick(&mut self) {
        let Some(iv) = self.cfg.snapshot_interval() else {
            return;
        };
        if !self.storage.is_failed() {
            let snap = self.storage.publish_snapshot(self.now);
            self.record(EventKind::SnapshotPublished, Actor::Storage, Actor::Cluster, snap.len() as u64);
            let now = self.now;
            self.broadcast_at(Actor::Storage, Message::Snapshot(snap), now);
        }
        let next = self.now + iv;
        self.schedule(next, Action::SnapshotTick);
    }

    fn quiescent(&self) -> bool {
        let live = || self.nodes.iter().filter(|nd| nd.alive);
        let height = live().map(|nd| nd.core.ledger().len()).max().unwrap_or(0);
        self.storage_busy_until <= self.now
            && self.nodes.iter().zip(&self.gens).all(|(nd, g)| !nd.alive || (g.is_exhausted() && nd.is_drained()))
            && live().all(|nd| nd.core.ledger().len() == height)
    }

    // ---- report ----

    fn finish(self, stop: StopReason) -> RunOutput {
        let storage_chain = self.storage.chain().clone();
        let node_ledgers: Vec<NodeLedger> =
            self.nodes.iter().map(|nd| NodeLedger { node: nd.id, alive: nd.alive, ledger: nd.core.ledger().clone() }).collect();
        let live: Vec<&SimNode> = self.nodes.iter().filter(|nd| nd.alive && !nd.awaiting_sync).collect();
        let valid = live.iter().filter(|nd| nd.core.ledger().verify_chain() && nd.core.ledger().same_chain(&storage_chain)).count();
        let validity = if live.is_empty() { 0.0 } else { 100.0 * valid as f64 / live.len() as f64 };
        let tracker = self.tracker;
        let blocks: Vec<BlockOutcome> = tracker.records.values().copied().collect();
        let count = |o: ConsensusOutcome| blocks.iter().filter(|b| b.outcome == Some(o)).count() as u64;
        let failed = blocks.iter().filter(|b| b.failed).count() as u64;
        let pending = blocks.iter().filter(|b| b.outcome.is_none() && !b.failed).count() as u64;
        let elapsed = tracker.last_commit.max(self.workload_end);
        let elapsed_s = elapsed.as_secs_f64();
        let bucket_ns = self.cfg.bucket.as_nanos().max(1);
        let mut timeseries = tracker.buckets.clone();
        let span = (elapsed.as_nanos() / bucket_ns) as usize + 1;
        if timeseries.len() < span {
            timeseries.resize(span, 0);
        }
        let stats = self.storage.stats();
        let report = MetricsReport {
            nodes: self.cfg.nodes,
            live_nodes: live.len() as u32,
            workload_fingerprint: self.workload.fingerprint(),
            elapsed_s,
            txns_generated: self.gens.iter().map(|g| g.generated()).sum(),
            txns_committed: tracker.committed_txns,
            throughput_tps: if elapsed_s > 0.0 { tracker.committed_txns as f64 / elapsed_s } else { 0.0 },
            txn_latency: LatencySummary::from_nanos(tracker.txn_latencies),
            block_latency: LatencySummary::from_nanos(tracker.block_latencies),
            blocks_proposed: blocks.len() as u64,
            blocks_committed: count(ConsensusOutcome::Committed),
            blocks_storage_committed: count(ConsensusOutcome::StorageCommitted),
            blocks_failed: failed,
            blocks_pending: pending,
            ledger_validity_pct: validity,
            storage_accesses: stats.accesses,
            storage_check_and_inserts: stats.check_and_inserts,
            storage_appends: stats.appends,
            storage_validations: stats.validations,
            storage_lookups: stats.lookups,
            storage_repairs: stats.repairs,
            monitor: self.monitor.counts(),
            restarts: self.monitor.restarts(),
            bucket: self.cfg.bucket,
            timeseries,
            workload_buckets: (self.workload_end.as_nanos() / bucket_ns) as usize,
        };
        RunOutput {
            report,
            log: self.log,
            monitor_events: self.monitor.events().to_vec(),
            storage_ledger: storage_chain,
            storage_stats: stats,
            node_ledgers,
            generated: self.gens.iter().map(|g| g.generated()).collect(),
            blocks,
            stop,
            end_time: self.now,
        }
    }
}

/// What a node sees when it receives a block with its last byte cut off.
fn corrupted_parse(block: &Block) -> LedgerError {
    let wire = block.wire_bytes().unwrap_or_default();
    match Block::decode_wire(&wire[..wire.len().saturating_sub(1)]) {
        Err(e) => e,
        Ok(_) => LedgerError::Truncated { expected: wire.len(), found: wire.len().saturating_sub(1) },
    }
}
