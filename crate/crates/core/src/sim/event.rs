use alloc::vec::Vec;
use core::fmt;

use super::monitor::Checkpoint;
use crate::consensus::ConsensusOutcome;
use crate::ledger::NodeId;
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Actor {
    Node(NodeId),
    Storage,
    Monitor,
    /// Broadcast destination.
    Cluster,
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Node(n) => write!(f, "n{n}"),
            Actor::Storage => f.write_str("storage"),
            Actor::Monitor => f.write_str("monitor"),
            Actor::Cluster => f.write_str("all"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    BlockProposal,
    Vote,
    Snapshot,
    StorageRequest,
    StorageReply,
    StorageCommit,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::BlockProposal => "proposal",
            MessageKind::Vote => "vote",
            MessageKind::Snapshot => "snapshot",
            MessageKind::StorageRequest => "storage_request",
            MessageKind::StorageReply => "storage_reply",
            MessageKind::StorageCommit => "storage_commit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    TxnCreated,
    BlockCreated,
    Send(MessageKind),
    Deliver(MessageKind),
    Drop(MessageKind),
    Decide(ConsensusOutcome),
    Escalate,
    Commit,
    AppendFailed,
    Defer,
    BlockFailed,
    PersistQueued,
    SnapshotHit,
    CheckAndInsert,
    StorageAppend,
    StorageDuplicate,
    StorageValidate,
    StorageLookup,
    StorageRepair,
    SnapshotPublished,
    Alert(Checkpoint),
    AckTimeout,
    RoundRestart,
    NodeKilled,
    NodeRestarted,
    NodeRepaired,
    StorageFailed,
    StorageRecovered,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Send(m) => return write!(f, "send.{}", m.name()),
            EventKind::Deliver(m) => return write!(f, "deliver.{}", m.name()),
            EventKind::Drop(m) => return write!(f, "drop.{}", m.name()),
            EventKind::Decide(o) => return write!(f, "decide.{}", outcome_name(*o)),
            EventKind::Alert(c) => return write!(f, "alert.{}", c.name()),
            EventKind::TxnCreated => "txn_created",
            EventKind::BlockCreated => "block_created",
            EventKind::Escalate => "escalate",
            EventKind::Commit => "commit",
            EventKind::AppendFailed => "append_failed",
            EventKind::Defer => "defer",
            EventKind::BlockFailed => "block_failed",
            EventKind::PersistQueued => "persist_queued",
            EventKind::SnapshotHit => "snapshot_hit",
            EventKind::CheckAndInsert => "check_and_insert",
            EventKind::StorageAppend => "storage_append",
            EventKind::StorageDuplicate => "storage_duplicate",
            EventKind::StorageValidate => "storage_validate",
            EventKind::StorageLookup => "storage_lookup",
            EventKind::StorageRepair => "storage_repair",
            EventKind::SnapshotPublished => "snapshot_published",
            EventKind::AckTimeout => "ack_timeout",
            EventKind::RoundRestart => "round_restart",
            EventKind::NodeKilled => "node_killed",
            EventKind::NodeRestarted => "node_restarted",
            EventKind::NodeRepaired => "node_repaired",
            EventKind::StorageFailed => "storage_failed",
            EventKind::StorageRecovered => "storage_recovered",
        };
        f.write_str(s)
    }
}

fn outcome_name(o: ConsensusOutcome) -> &'static str {
    match o {
        ConsensusOutcome::Committed => "committed",
        ConsensusOutcome::StorageCommitted => "storage_committed",
        ConsensusOutcome::Deferred => "deferred",
    }
}

/// One log record. `digest` identifies the payload: a block-hash prefix,
/// a transaction id, or a round number for round-level records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub time: SimTime,
    pub kind: EventKind,
    pub from: Actor,
    pub to: Actor,
    pub digest: u64,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {:016x}", self.time.as_nanos(), self.kind, self.from, self.to, self.digest)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn push(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.iter()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }
}
