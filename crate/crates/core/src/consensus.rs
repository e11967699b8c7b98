//! Two-phase block consensus: a low-difficulty PoW check on every compute
//! node, a parallel vote exchange with strict-majority commit, and a fallback
//! to the shared storage when the majority is not reached.

use alloc::collections::{BTreeSet, VecDeque};

use crate::ledger::{AppendError, Block, BlockHash, Ledger, LedgerRole, NodeId};
use crate::pow::Difficulty;
use crate::storage::{HashTableSnapshot, SharedStorage, StorageError};

pub const DEFAULT_MAX_RETRIES: u32 = 3;

/// Commit requires strictly more than this fraction of the cluster.
pub const MAJORITY_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vote {
    pub voter: NodeId,
    pub block_hash: BlockHash,
    pub valid: bool,
}

/// The set of nodes that agreed on one block in one round.
#[derive(Clone, Debug)]
pub struct VoteTally {
    block_hash: BlockHash,
    cluster_size: u32,
    agreed: BTreeSet<NodeId>,
    responded: BTreeSet<NodeId>,
    storage_agreed: bool,
}

impl VoteTally {
    pub fn new(block_hash: BlockHash, cluster_size: u32) -> Self {
        VoteTally { block_hash, cluster_size, agreed: BTreeSet::new(), responded: BTreeSet::new(), storage_agreed: false }
    }

    /// Record a vote; votes for other blocks and voters outside the cluster are ignored.
    pub fn record(&mut self, vote: &Vote) {
        if vote.block_hash != self.block_hash || vote.voter >= self.cluster_size {
            return;
        }
        self.responded.insert(vote.voter);
        if vote.valid {
            self.agreed.insert(vote.voter);
        }
    }

    pub fn block_hash(&self) -> BlockHash {
        self.block_hash
    }

    pub fn cluster_size(&self) -> u32 {
        self.cluster_size
    }

    pub fn agreed(&self) -> &BTreeSet<NodeId> {
        &self.agreed
    }

    pub fn has_responded(&self, node: NodeId) -> bool {
        self.responded.contains(&node)
    }

    pub fn responded_count(&self) -> usize {
        self.responded.len()
    }

    /// `|agreedNodes| > N/2`.
    pub fn has_majority(&self) -> bool {
        self.agreed.len() > (self.cluster_size / 2) as usize
    }

    pub fn storage_agreed(&self) -> bool {
        self.storage_agreed
    }

    /// Storage joins the agreement only on the fallback path.
    pub fn mark_storage_agreed(&mut self) -> bool {
        if self.has_majority() {
            return false;
        }
        self.storage_agreed = true;
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConsensusOutcome {
    Committed,
    StorageCommitted,
    Deferred,
}

impl ConsensusOutcome {
    pub fn is_commit(self) -> bool {
        !matches!(self, ConsensusOutcome::Deferred)
    }
}

/// Anything that can run the storage-side check of a block.
pub trait StorageValidator {
    fn storage_validate(&mut self, block: &Block) -> Result<bool, StorageError>;
}

impl StorageValidator for SharedStorage {
    fn storage_validate(&mut self, block: &Block) -> Result<bool, StorageError> {
        SharedStorage::storage_validate(self, block)
    }
}

/// Outcome once the storage has answered on the fallback path.
pub fn fallback_outcome(tally: &mut VoteTally, storage_accepted: bool) -> ConsensusOutcome {
    if storage_accepted && tally.mark_storage_agreed() {
        ConsensusOutcome::StorageCommitted
    } else if tally.has_majority() {
        ConsensusOutcome::Committed
    } else {
        ConsensusOutcome::Deferred
    }
}

/// Majority commits; otherwise the storage decides. Storage errors are
/// returned so the caller can restart the round.
pub fn decide(tally: &mut VoteTally, block: &Block, storage: &mut impl StorageValidator) -> Result<ConsensusOutcome, StorageError> {
    if tally.has_majority() {
        return Ok(ConsensusOutcome::Committed);
    }
    let accepted = storage.storage_validate(block)?;
    Ok(fallback_outcome(tally, accepted))
}

/// Local PoW and linkage check; never an error, an invalid block is a `false` vote.
pub fn validate_local(voter: NodeId, ledger: &Ledger, block: &Block, compute_difficulty: Difficulty) -> Vote {
    let block_hash = block.hash().unwrap_or(BlockHash::ZERO);
    let valid = block.puzzle_difficulty >= compute_difficulty.bits() && ledger.check_successor(block).is_ok();
    Vote { voter, block_hash, valid }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeferResult {
    Queued { retry: u32 },
    Dropped { retries: u32 },
}

/// Blocks that failed both the majority and the storage check, awaiting
/// another round. Generic so callers can queue blocks with extra metadata.
#[derive(Clone, Debug)]
pub struct WaitingQueue<T = Block> {
    entries: VecDeque<(T, u32)>,
    max_retries: u32,
}

impl<T: AsRef<Block>> WaitingQueue<T> {
    pub fn new(max_retries: u32) -> Self {
        WaitingQueue { entries: VecDeque::new(), max_retries }
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }

    /// `prior` is the retry count the block carried into the round that deferred it.
    pub fn defer(&mut self, block: T, prior: u32) -> DeferResult {
        let retry = prior + 1;
        if retry > self.max_retries {
            return DeferResult::Dropped { retries: prior };
        }
        self.entries.push_back((block, retry));
        DeferResult::Queued { retry }
    }

    pub fn pop(&mut self) -> Option<(T, u32)> {
        self.entries.pop_front()
    }

    pub fn front(&self) -> Option<&(T, u32)> {
        self.entries.front()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, hash: &BlockHash) -> bool {
        self.entries.iter().any(|(b, _)| b.as_ref().hash().ok().as_ref() == Some(hash))
    }

    pub fn remove(&mut self, hash: &BlockHash) {
        self.entries.retain(|(b, _)| b.as_ref().hash().ok().as_ref() != Some(hash));
    }

    /// Remove and return the first entry matching `pred`.
    pub fn take_where(&mut self, mut pred: impl FnMut(&T) -> bool) -> Option<(T, u32)> {
        let i = self.entries.iter().position(|(b, _)| pred(b))?;
        self.entries.remove(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(T, u32)> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PersistPlan {
    /// Send one check-and-insert to storage.
    Request,
    /// Hash already in this node's snapshot.
    InSnapshot,
    /// This node already asked storage about this block.
    AlreadyAttempted,
    /// Storage validated and stored the block itself.
    StoredByStorage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommitReceipt {
    pub hash: BlockHash,
    pub persist: PersistPlan,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CommitError {
    #[error("a deferred block cannot be committed")]
    NotCommittable,
    #[error("local append failed: {0}")]
    Append(#[from] AppendError),
}

/// Consensus-relevant state of one compute node.
#[derive(Clone, Debug)]
pub struct ConsensusNode<T = Block> {
    id: NodeId,
    ledger: Ledger,
    compute_difficulty: Difficulty,
    waiting: WaitingQueue<T>,
    snapshot: HashTableSnapshot,
    persist_attempted: BTreeSet<BlockHash>,
    inconsistent: bool,
}

impl<T: AsRef<Block>> ConsensusNode<T> {
    pub fn new(id: NodeId, compute_difficulty: Difficulty, max_retries: u32) -> Self {
        ConsensusNode {
            id,
            ledger: Ledger::new(LedgerRole::Compute(id)),
            compute_difficulty,
            waiting: WaitingQueue::new(max_retries),
            snapshot: HashTableSnapshot::empty(),
            persist_attempted: BTreeSet::new(),
            inconsistent: false,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn compute_difficulty(&self) -> Difficulty {
        self.compute_difficulty
    }

    pub fn waiting(&self) -> &WaitingQueue<T> {
        &self.waiting
    }

    pub fn waiting_mut(&mut self) -> &mut WaitingQueue<T> {
        &mut self.waiting
    }

    pub fn snapshot(&self) -> &HashTableSnapshot {
        &self.snapshot
    }

    pub fn install_snapshot(&mut self, snapshot: HashTableSnapshot) {
        self.snapshot = snapshot;
    }

    pub fn is_inconsistent(&self) -> bool {
        self.inconsistent
    }

    pub fn validate_local(&self, block: &Block) -> Vote {
        validate_local(self.id, &self.ledger, block, self.compute_difficulty)
    }

    /// Append a decided block and work out whether storage still needs it.
    /// A failed append marks the node inconsistent; it should be repaired.
    pub fn commit(&mut self, block: Block, outcome: ConsensusOutcome) -> Result<CommitReceipt, CommitError> {
        if !outcome.is_commit() {
            return Err(CommitError::NotCommittable);
        }
        let hash = match self.ledger.append_block(block) {
            Ok(h) => h,
            Err(e) => {
                self.inconsistent = true;
                return Err(e.into());
            }
        };
        self.waiting.remove(&hash);
        let persist = if outcome == ConsensusOutcome::StorageCommitted {
            self.persist_attempted.insert(hash);
            PersistPlan::StoredByStorage
        } else if self.snapshot.contains(&hash) {
            PersistPlan::InSnapshot
        } else if !self.persist_attempted.insert(hash) {
            PersistPlan::AlreadyAttempted
        } else {
            PersistPlan::Request
        };
        Ok(CommitReceipt { hash, persist })
    }

    pub fn defer(&mut self, block: T, prior_retries: u32) -> DeferResult {
        self.waiting.defer(block, prior_retries)
    }

    /// Replace the local chain with a storage copy.
    pub fn repair(&mut self, ledger: Ledger) {
        self.persist_attempted.extend(ledger.hashes().iter().copied());
        self.ledger = ledger.with_role(LedgerRole::Compute(self.id));
        self.inconsistent = false;
    }

    /// Forget volatile state, as after a process restart.
    pub fn reset(&mut self) {
        self.ledger = Ledger::new(LedgerRole::Compute(self.id));
        self.waiting.clear();
        self.snapshot = HashTableSnapshot::empty();
        self.persist_attempted.clear();
        self.inconsistent = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{hash_with_nonce, Transaction};
    use crate::pow;
    use alloc::vec;
    use alloc::vec::Vec;

    struct FixedStorage(Result<bool, StorageError>, usize);

    impl StorageValidator for FixedStorage {
        fn storage_validate(&mut self, _: &Block) -> Result<bool, StorageError> {
            self.1 += 1;
            self.0.clone()
        }
    }

    fn mined_on(l: &Ledger, bits: u32) -> Block {
        let txns = vec![Transaction::new(l.len() as u64, 1, 2, 0, 3)];
        let mut b = Block::new(l.next_block_id(), l.tip_hash(), 0, txns, Difficulty::new(bits).unwrap());
        b.mined_nonce = pow::mine(&b.canonical_bytes().unwrap(), b.difficulty(), 0).unwrap().nonce;
        b
    }

    fn tally_of(n: u32, agreed: &[NodeId]) -> VoteTally {
        let h = BlockHash([7; 32]);
        let mut t = VoteTally::new(h, n);
        for v in 0..n {
            t.record(&Vote { voter: v, block_hash: h, valid: agreed.contains(&v) });
        }
        t
    }

    #[test]
    fn fresh_successor_is_valid() {
        let node: ConsensusNode = ConsensusNode::new(0, Difficulty::new(12).unwrap(), 3);
        let b = mined_on(node.ledger(), 12);
        assert!(node.validate_local(&b).valid);
    }

    #[test]
    fn stale_parent_is_invalid() {
        let mut node: ConsensusNode = ConsensusNode::new(0, Difficulty::new(8).unwrap(), 3);
        let b1 = mined_on(node.ledger(), 8);
        let stale_sibling = {
            let mut s = b1.clone();
            s.txn_list[0].txn_amount = 99;
            s.mined_nonce = pow::mine(&s.canonical_bytes().unwrap(), s.difficulty(), 0).unwrap().nonce;
            s
        };
        node.commit(b1, ConsensusOutcome::Committed).unwrap();
        assert!(!node.validate_local(&stale_sibling).valid);
    }

    #[test]
    fn one_bit_short_is_invalid() {
        let node: ConsensusNode = ConsensusNode::new(0, Difficulty::new(12).unwrap(), 3);
        let mut b = Block::new(1, node.ledger().tip_hash(), 0, vec![], Difficulty::new(12).unwrap());
        let pre = b.canonical_bytes().unwrap();
        b.mined_nonce = (0u64..).find(|&n| hash_with_nonce(&pre, n).leading_zero_bits() == 11).unwrap();
        assert!(!node.validate_local(&b).valid);
    }

    #[test]
    fn undeclared_difficulty_is_invalid() {
        let node: ConsensusNode = ConsensusNode::new(0, Difficulty::new(12).unwrap(), 3);
        let b = mined_on(node.ledger(), 2);
        assert!(!node.validate_local(&b).valid);
    }

    #[test]
    fn tally_counts() {
        assert_eq!(tally_of(4, &[0, 1, 2, 3]).agreed().len(), 4);
        assert_eq!(tally_of(4, &[]).agreed().len(), 0);
        let mut t = VoteTally::new(BlockHash([1; 32]), 4);
        t.record(&Vote { voter: 0, block_hash: BlockHash([2; 32]), valid: true });
        t.record(&Vote { voter: 9, block_hash: BlockHash([1; 32]), valid: true });
        assert!(t.agreed().is_empty());
    }

    #[test]
    fn three_of_four_commits() {
        let mut s = FixedStorage(Ok(false), 0);
        let out = decide(&mut tally_of(4, &[1, 2, 3]), &Block::genesis(), &mut s).unwrap();
        assert_eq!(out, ConsensusOutcome::Committed);
        assert_eq!(s.1, 0);
    }

    #[test]
    fn two_of_four_falls_back() {
        let mut s = FixedStorage(Ok(true), 0);
        let mut t = tally_of(4, &[1, 2]);
        assert_eq!(decide(&mut t, &Block::genesis(), &mut s).unwrap(), ConsensusOutcome::StorageCommitted);
        assert!(t.storage_agreed());
        assert_eq!(s.1, 1);
        let mut s = FixedStorage(Ok(false), 0);
        assert_eq!(decide(&mut tally_of(4, &[1, 2]), &Block::genesis(), &mut s).unwrap(), ConsensusOutcome::Deferred);
        let mut s = FixedStorage(Err(StorageError::Unavailable), 0);
        assert_eq!(decide(&mut tally_of(4, &[1]), &Block::genesis(), &mut s), Err(StorageError::Unavailable));
    }

    #[test]
    fn majority_rule_for_small_clusters() {
        // Exhaustive over every subset for N <= 8 against a counting oracle.
        for n in 1u32..=8 {
            for mask in 0u32..(1 << n) {
                let agreed: Vec<NodeId> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                let oracle = 2 * mask.count_ones() > n;
                for storage_ok in [false, true] {
                    let mut s = FixedStorage(Ok(storage_ok), 0);
                    let out = decide(&mut tally_of(n, &agreed), &Block::genesis(), &mut s).unwrap();
                    let expected = match (oracle, storage_ok) {
                        (true, _) => ConsensusOutcome::Committed,
                        (false, true) => ConsensusOutcome::StorageCommitted,
                        (false, false) => ConsensusOutcome::Deferred,
                    };
                    assert_eq!(out, expected, "n={n} mask={mask:b}");
                    assert_eq!(s.1, usize::from(!oracle));
                }
            }
        }
    }

    #[test]
    fn defer_counts_and_exhausts() {
        let mut q: WaitingQueue = WaitingQueue::new(3);
        let b = Block::genesis();
        assert_eq!(q.defer(b.clone(), 0), DeferResult::Queued { retry: 1 });
        let (b, r) = q.pop().unwrap();
        assert_eq!(q.defer(b.clone(), r), DeferResult::Queued { retry: 2 });
        let (b, r) = q.pop().unwrap();
        assert_eq!(q.defer(b.clone(), r), DeferResult::Queued { retry: 3 });
        let (b, r) = q.pop().unwrap();
        assert_eq!(q.defer(b, r), DeferResult::Dropped { retries: 3 });
        assert!(q.is_empty());
    }

    #[test]
    fn deferred_then_committed_leaves_waiting_queue() {
        let mut node: ConsensusNode = ConsensusNode::new(0, Difficulty::new(8).unwrap(), 3);
        let b = mined_on(node.ledger(), 8);
        let h = b.hash().unwrap();
        let mut t = tally_of(4, &[0]);
        let mut s = FixedStorage(Ok(false), 0);
        assert_eq!(decide(&mut t, &b, &mut s).unwrap(), ConsensusOutcome::Deferred);
        node.defer(b.clone(), 0);
        assert!(node.waiting().contains(&h));
        let (retry, _) = node.waiting_mut().front().cloned().unwrap();
        let mut t = tally_of(4, &[0, 1, 2]);
        let out = decide(&mut t, &retry, &mut s).unwrap();
        assert_eq!(out, ConsensusOutcome::Committed);
        node.commit(retry, out).unwrap();
        assert!(!node.waiting().contains(&h));
        assert_eq!(node.ledger().tip_hash(), h);
    }

    #[test]
    fn commit_persists_once() {
        let mut node: ConsensusNode = ConsensusNode::new(0, Difficulty::new(4).unwrap(), 3);
        let b = mined_on(node.ledger(), 4);
        let r = node.commit(b.clone(), ConsensusOutcome::Committed).unwrap();
        assert_eq!(r.persist, PersistPlan::Request);
        assert!(matches!(node.commit(b, ConsensusOutcome::Committed), Err(CommitError::Append(AppendError::Duplicate(_)))));
        assert!(node.is_inconsistent());
    }

    #[test]
    fn commit_skips_persist_when_snapshot_has_it() {
        let mut storage = SharedStorage::new(Difficulty::new(20).unwrap());
        let mut node: ConsensusNode = ConsensusNode::new(1, Difficulty::new(4).unwrap(), 3);
        let b = mined_on(node.ledger(), 4);
        storage.check_and_insert(&b).unwrap();
        node.install_snapshot(storage.publish_snapshot(crate::time::SimTime::ZERO));
        assert_eq!(node.commit(b, ConsensusOutcome::Committed).unwrap().persist, PersistPlan::InSnapshot);
    }

    #[test]
    fn storage_commit_needs_no_persist() {
        let mut node: ConsensusNode = ConsensusNode::new(1, Difficulty::new(4).unwrap(), 3);
        let b = mined_on(node.ledger(), 8);
        assert_eq!(node.commit(b, ConsensusOutcome::StorageCommitted).unwrap().persist, PersistPlan::StoredByStorage);
        assert_eq!(node.commit(Block::genesis(), ConsensusOutcome::Deferred), Err(CommitError::NotCommittable));
    }
}
