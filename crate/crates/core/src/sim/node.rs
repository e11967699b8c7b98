use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consensus::{ConsensusNode, Vote, VoteTally};
use crate::ledger::{Block, BlockHash, NodeId};
use crate::pow::Difficulty;
use crate::time::{SimDuration, SimTime};
use crate::txpool::{BlockQueues, TxnQueue};

/// Creator id in the high half, per-creator sequence in the low half.
pub type BlockKey = u64;

/// A block as it moves through the queues, tagged with its origin and round.
#[derive(Clone, Debug)]
pub struct QueuedBlock {
    pub key: BlockKey,
    pub block: Block,
    pub round: u64,
    pub retry: u32,
}

impl AsRef<Block> for QueuedBlock {
    fn as_ref(&self) -> &Block {
        &self.block
    }
}

/// `item == None` is a pass: the proposer had nothing to propose.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub round: u64,
    pub proposer: NodeId,
    pub item: Option<QueuedBlock>,
    pub suspects: Vec<NodeId>,
    /// Proposer's chain length when it broadcast.
    pub height: u64,
}

#[derive(Clone, Debug)]
pub(crate) struct RoundState {
    pub item: QueuedBlock,
    pub tally: VoteTally,
    pub expected: BTreeSet<NodeId>,
    pub trapped: bool,
    pub decided: bool,
    pub escalate: bool,
    pub hardened: Option<Block>,
    pub lookups_left: u32,
}

#[derive(Clone, Debug)]
pub enum StorageJob {
    Persist { block: Block, due: SimTime },
    Validate { block: Block, round: u64 },
    Lookup { hash: BlockHash, round: u64 },
    Repair,
}

impl StorageJob {
    pub(crate) fn blocks_round(&self) -> bool {
        matches!(self, StorageJob::Validate { .. } | StorageJob::Lookup { .. })
    }

    pub(crate) fn digest(&self) -> u64 {
        match self {
            StorageJob::Persist { block, .. } | StorageJob::Validate { block, .. } => block.hash().map_or(0, |h| h.prefix_u64()),
            StorageJob::Lookup { hash, .. } => hash.prefix_u64(),
            StorageJob::Repair => 0,
        }
    }
}

/// Stop-and-wait request pipe from one node to the storage: one request in
/// flight, the rest queued in order.
#[derive(Clone, Debug, Default)]
pub(crate) struct StorageChannel {
    pub outbox: VecDeque<StorageJob>,
    pub in_flight: Option<(u64, StorageJob)>,
    pub wake: Option<SimTime>,
    pub hold_until: SimTime,
    pub last_due: SimTime,
}

impl StorageChannel {
    pub fn is_idle(&self) -> bool {
        self.outbox.is_empty() && self.in_flight.is_none()
    }
}

pub(crate) struct SimNode {
    pub id: NodeId,
    pub alive: bool,
    pub epoch: u32,
    pub core: ConsensusNode<QueuedBlock>,
    pub txq: TxnQueue,
    pub queues: BlockQueues<QueuedBlock>,
    pub round: u64,
    pub in_round: bool,
    pub proposal_seen: bool,
    pub proposing: Option<QueuedBlock>,
    pub current: Option<RoundState>,
    pub suspects: BTreeSet<NodeId>,
    pub voted: BTreeSet<NodeId>,
    pub future_votes: BTreeMap<u64, Vec<Vote>>,
    pub future_passes: BTreeSet<u64>,
    pub chan: StorageChannel,
    pub rng: ChaCha8Rng,
    pub next_block_seq: u32,
    pub awaiting_sync: bool,
    pub repairing: bool,
    pub exceptions: VecDeque<SimTime>,
}

impl SimNode {
    pub fn new(id: NodeId, seed: u64, compute: Difficulty, max_retries: u32, threshold: usize, pop_interval: SimDuration) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(u64::from(id) + 1);
        SimNode {
            id,
            alive: true,
            epoch: 0,
            core: ConsensusNode::new(id, compute, max_retries),
            txq: TxnQueue::new(threshold),
            queues: BlockQueues::new(pop_interval),
            round: 0,
            in_round: false,
            proposal_seen: false,
            proposing: None,
            current: None,
            suspects: BTreeSet::new(),
            voted: BTreeSet::new(),
            future_votes: BTreeMap::new(),
            future_passes: BTreeSet::new(),
            chan: StorageChannel::default(),
            rng,
            next_block_seq: 0,
            awaiting_sync: false,
            repairing: false,
            exceptions: VecDeque::new(),
        }
    }

    /// Lose everything held in memory, as after a crash and restart.
    pub fn wipe(&mut self) {
        self.core.reset();
        self.txq = TxnQueue::new(self.txq.threshold());
        self.queues.clear();
        self.in_round = false;
        self.proposal_seen = false;
        self.proposing = None;
        self.current = None;
        self.suspects.clear();
        self.voted.clear();
        self.future_votes.clear();
        self.future_passes.clear();
        self.chan = StorageChannel::default();
    }

    pub fn is_drained(&self) -> bool {
        self.txq.is_empty()
            && self.queues.outgoing_len() == 0
            && self.queues.incoming_len() == 0
            && self.core.waiting().is_empty()
            && self.chan.is_idle()
            && self.current.is_none()
            && self.proposing.is_none()
            && !self.awaiting_sync
            && !self.repairing
    }
}

/// First node, counting up from `round mod n`, that is not suspected.
pub fn proposer_for(round: u64, n: u32, suspects: &BTreeSet<NodeId>) -> NodeId {
    let n64 = u64::from(n.max(1));
    (0..n64).map(|i| ((round + i) % n64) as NodeId).find(|c| !suspects.contains(c)).unwrap_or((round % n64) as NodeId)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proposer_rotates_and_skips_suspects() {
        let none = BTreeSet::new();
        assert_eq!((0..6).map(|r| proposer_for(r, 3, &none)).collect::<Vec<_>>(), [0, 1, 2, 0, 1, 2]);
        let s: BTreeSet<NodeId> = [1].into_iter().collect();
        assert_eq!(proposer_for(1, 3, &s), 2);
        let all: BTreeSet<NodeId> = (0..3).collect();
        assert_eq!(proposer_for(4, 3, &all), 1);
    }
}
