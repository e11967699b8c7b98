//! Fault monitor with three checkpoints: message exchange, exit routine and
//! exception handler.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use super::event::Actor;
use crate::ledger::{LedgerError, NodeId};
use crate::metrics::MonitorCounts;
use crate::time::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Checkpoint {
    MessageExchange,
    ExitRoutine,
    ExceptionHandler,
}

impl Checkpoint {
    pub fn name(self) -> &'static str {
        match self {
            Checkpoint::MessageExchange => "message_exchange",
            Checkpoint::ExitRoutine => "exit_routine",
            Checkpoint::ExceptionHandler => "exception_handler",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AlertDetail {
    MissingVote { observer: NodeId },
    MissingProposal { observer: NodeId },
    AckTimeout { observer: NodeId },
    NoCompletion,
    Trapped(LedgerError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonitorEvent {
    pub checkpoint: Checkpoint,
    pub subject: Actor,
    pub time: SimTime,
    pub round: u64,
    pub detail: AlertDetail,
}

#[derive(Clone, Debug)]
pub struct Monitor {
    events: Vec<MonitorEvent>,
    seen: BTreeSet<(u64, Actor, Checkpoint)>,
    completions: BTreeMap<u64, BTreeSet<NodeId>>,
    /// Node and the first round it is accountable for.
    registered: BTreeMap<NodeId, u64>,
    restarted_rounds: BTreeSet<u64>,
    counts: MonitorCounts,
}

impl Monitor {
    pub fn new(nodes: u32) -> Self {
        Monitor {
            events: Vec::new(),
            seen: BTreeSet::new(),
            completions: BTreeMap::new(),
            registered: (0..nodes).map(|n| (n, 0)).collect(),
            restarted_rounds: BTreeSet::new(),
            counts: MonitorCounts::default(),
        }
    }

    /// Record an alert; repeats for the same (round, subject, checkpoint) are
    /// folded into the first one. Returns whether it was new.
    pub fn alert(&mut self, event: MonitorEvent) -> bool {
        if !self.seen.insert((event.round, event.subject, event.checkpoint)) {
            return false;
        }
        match event.checkpoint {
            Checkpoint::MessageExchange => self.counts.message_exchange += 1,
            Checkpoint::ExitRoutine => self.counts.exit_routine += 1,
            Checkpoint::ExceptionHandler => self.counts.exception_handler += 1,
        }
        self.events.push(event);
        true
    }

    /// A node finished `round`, deferral included. Returns true for the first
    /// record of the round, when the caller should schedule the exit check.
    pub fn post_completion(&mut self, node: NodeId, round: u64) -> bool {
        self.registered.entry(node).or_insert(round);
        let set = self.completions.entry(round).or_default();
        let first = set.is_empty();
        set.insert(node);
        first
    }

    pub fn node_exit_check(&self, node: NodeId, round: u64) -> bool {
        self.completions.get(&round).is_some_and(|s| s.contains(&node))
    }

    /// Alert for every registered node without a completion record for
    /// `round`; flagged nodes are unregistered until they post again.
    pub fn exit_check(&mut self, round: u64, now: SimTime) -> Vec<MonitorEvent> {
        let done = self.completions.remove(&round).unwrap_or_default();
        let missing: Vec<NodeId> = self.registered.iter().filter(|(n, since)| **since <= round && !done.contains(n)).map(|(n, _)| *n).collect();
        let mut raised = Vec::new();
        for node in missing {
            self.registered.remove(&node);
            let ev = MonitorEvent { checkpoint: Checkpoint::ExitRoutine, subject: Actor::Node(node), time: now, round, detail: AlertDetail::NoCompletion };
            if self.alert(ev.clone()) {
                raised.push(ev);
            }
        }
        raised
    }

    pub fn trap_exception(&mut self, node: NodeId, round: u64, now: SimTime, error: LedgerError) -> MonitorEvent {
        let ev = MonitorEvent { checkpoint: Checkpoint::ExceptionHandler, subject: Actor::Node(node), time: now, round, detail: AlertDetail::Trapped(error) };
        self.alert(ev.clone());
        ev
    }

    /// True the first time a restart is requested for `round`.
    pub fn note_restart(&mut self, round: u64) -> bool {
        self.restarted_rounds.insert(round)
    }

    pub fn restarts(&self) -> u64 {
        self.restarted_rounds.len() as u64
    }

    pub fn events(&self) -> &[MonitorEvent] {
        &self.events
    }

    pub fn counts(&self) -> MonitorCounts {
        self.counts
    }
}
