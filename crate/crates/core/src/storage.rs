//! The shared-storage replica: the persistent chain, its hash table, the
//! write-once persist protocol and high-difficulty fallback validation.
//!
//! Every operation goes through `&mut self`, so callers see one total order
//! of requests. The simulator wraps this in a single storage actor.

use alloc::collections::BTreeSet;
use alloc::sync::Arc;

use crate::ledger::{AppendError, Block, BlockHash, Ledger, LedgerRole, NodeId};
use crate::pow::Difficulty;
use crate::time::SimTime;

pub const DEFAULT_STORAGE_DIFFICULTY_BITS: u32 = 20;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum StorageError {
    #[error("shared storage is unavailable")]
    Unavailable,
    #[error("storage chain rejected block: {0}")]
    Rejected(#[from] AppendError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PersistOutcome {
    Persisted,
    Duplicate,
}

/// A node-local copy of the storage hash table.
#[derive(Clone, Debug, Default)]
pub struct HashTableSnapshot {
    hashes: Arc<BTreeSet<BlockHash>>,
    taken_at: SimTime,
}

impl HashTableSnapshot {
    pub fn empty() -> Self {
        HashTableSnapshot::default()
    }

    pub fn contains(&self, hash: &BlockHash) -> bool {
        self.hashes.contains(hash)
    }

    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }

    pub fn taken_at(&self) -> SimTime {
        self.taken_at
    }

    pub fn hashes(&self) -> &BTreeSet<BlockHash> {
        &self.hashes
    }
}

/// Request counters. `accesses` counts every request that reached storage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StorageStats {
    pub accesses: u64,
    pub check_and_inserts: u64,
    pub appends: u64,
    pub duplicates: u64,
    pub validations: u64,
    pub lookups: u64,
    pub repairs: u64,
}

#[derive(Clone, Debug)]
pub struct SharedStorage {
    chain: Ledger,
    hash_table: BTreeSet<BlockHash>,
    // Shared with outstanding snapshots; rebuilt lazily after a write.
    published: Option<Arc<BTreeSet<BlockHash>>>,
    storage_difficulty: Difficulty,
    failed: bool,
    stats: StorageStats,
}

impl SharedStorage {
    pub fn new(storage_difficulty: Difficulty) -> Self {
        let chain = Ledger::new(LedgerRole::Storage);
        let hash_table = chain.hashes().iter().copied().collect();
        SharedStorage { chain, hash_table, published: None, storage_difficulty, failed: false, stats: StorageStats::default() }
    }

    pub fn chain(&self) -> &Ledger {
        &self.chain
    }

    pub fn hash_table(&self) -> &BTreeSet<BlockHash> {
        &self.hash_table
    }

    pub fn storage_difficulty(&self) -> Difficulty {
        self.storage_difficulty
    }

    pub fn stats(&self) -> StorageStats {
        self.stats
    }

    pub fn is_failed(&self) -> bool {
        self.failed
    }

    pub fn fail(&mut self) {
        self.failed = true;
    }

    pub fn recover(&mut self) {
        self.failed = false;
    }

    /// H equals exactly the hashes of the chain.
    pub fn is_coherent(&self) -> bool {
        self.hash_table.len() == self.chain.len() && self.chain.hashes().iter().all(|h| self.hash_table.contains(h))
    }

    fn available(&self) -> Result<(), StorageError> {
        if self.failed {
            Err(StorageError::Unavailable)
        } else {
            Ok(())
        }
    }

    fn append(&mut self, block: Block) -> Result<BlockHash, StorageError> {
        let hash = self.chain.append_block(block)?;
        self.hash_table.insert(hash);
        self.published = None;
        self.stats.appends += 1;
        Ok(hash)
    }

    /// Storage side of persist: one atomic check-and-insert on the hash table.
    pub fn check_and_insert(&mut self, block: &Block) -> Result<PersistOutcome, StorageError> {
        self.available()?;
        self.stats.accesses += 1;
        self.stats.check_and_inserts += 1;
        let hash = block.hash().map_err(AppendError::from)?;
        if self.hash_table.contains(&hash) {
            self.stats.duplicates += 1;
            return Ok(PersistOutcome::Duplicate);
        }
        self.append(block.clone())?;
        Ok(PersistOutcome::Persisted)
    }

    /// Caller consults its snapshot first; a hit costs no storage access.
    pub fn persist_in_storage(&mut self, block: &Block, snapshot: &HashTableSnapshot) -> Result<PersistOutcome, StorageError> {
        let hash = block.hash().map_err(AppendError::from)?;
        if snapshot.contains(&hash) {
            return Ok(PersistOutcome::Duplicate);
        }
        self.check_and_insert(block)
    }

    /// Fallback validation: parent must be the storage tip and the PoW must
    /// meet the storage difficulty. Accepted blocks are appended.
    pub fn storage_validate(&mut self, block: &Block) -> Result<bool, StorageError> {
        self.available()?;
        self.stats.accesses += 1;
        self.stats.validations += 1;
        if block.puzzle_difficulty < self.storage_difficulty.bits() || self.chain.check_successor(block).is_err() {
            return Ok(false);
        }
        self.append(block.clone())?;
        Ok(true)
    }

    /// Validation request from one of several nodes escalating the same block:
    /// the first request validates, later ones are answered from the hash table.
    pub fn validate_once(&mut self, block: &Block) -> Result<ValidateReply, StorageError> {
        self.available()?;
        let hash = block.hash().map_err(AppendError::from)?;
        if self.hash_table.contains(&hash) {
            self.stats.accesses += 1;
            self.stats.duplicates += 1;
            return Ok(ValidateReply::AlreadyStored);
        }
        Ok(if self.storage_validate(block)? { ValidateReply::Accepted } else { ValidateReply::Rejected })
    }

    pub fn lookup(&mut self, hash: &BlockHash) -> Result<bool, StorageError> {
        self.available()?;
        self.stats.accesses += 1;
        self.stats.lookups += 1;
        Ok(self.hash_table.contains(hash))
    }

    pub fn publish_snapshot(&mut self, now: SimTime) -> HashTableSnapshot {
        let hashes = self.published.get_or_insert_with(|| Arc::new(self.hash_table.clone())).clone();
        HashTableSnapshot { hashes, taken_at: now }
    }

    /// A copy of the storage chain for a node that lost or corrupted its own.
    pub fn repair_node(&mut self, node: NodeId) -> Result<Ledger, StorageError> {
        self.available()?;
        self.stats.accesses += 1;
        self.stats.repairs += 1;
        Ok(self.chain.clone().with_role(LedgerRole::Compute(node)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidateReply {
    Accepted,
    AlreadyStored,
    Rejected,
}

impl ValidateReply {
    pub fn is_stored(self) -> bool {
        !matches!(self, ValidateReply::Rejected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{hash_with_nonce, Transaction};
    use crate::pow;
    use alloc::vec;

    fn block_on(tip: &Ledger, bits: u32) -> Block {
        let txns = vec![Transaction::new(tip.len() as u64, 0, 1, 0, 9)];
        let mut b = Block::new(tip.next_block_id(), tip.tip_hash(), 0, txns, Difficulty::new(bits).unwrap());
        b.mined_nonce = pow::mine(&b.canonical_bytes().unwrap(), b.difficulty(), 0).unwrap().nonce;
        b
    }

    fn storage() -> SharedStorage {
        SharedStorage::new(Difficulty::new(DEFAULT_STORAGE_DIFFICULTY_BITS).unwrap())
    }

    #[test]
    fn snapshot_hit_costs_no_access() {
        let mut s = storage();
        let b = block_on(s.chain(), 8);
        s.check_and_insert(&b).unwrap();
        let snap = s.publish_snapshot(SimTime::ZERO);
        let before = s.stats().accesses;
        assert_eq!(s.persist_in_storage(&b, &snap), Ok(PersistOutcome::Duplicate));
        assert_eq!(s.stats().accesses, before);
    }

    #[test]
    fn fresh_block_is_persisted() {
        let mut s = storage();
        let b = block_on(s.chain(), 8);
        assert_eq!(s.persist_in_storage(&b, &HashTableSnapshot::empty()), Ok(PersistOutcome::Persisted));
        assert_eq!(s.chain().len(), 2);
        assert!(s.is_coherent());
    }

    #[test]
    fn race_has_one_winner_in_both_orders() {
        for order in [[0usize, 1], [1, 0]] {
            let mut s = storage();
            let b = block_on(s.chain(), 8);
            let empty = HashTableSnapshot::empty();
            let mut results = [None, None];
            for node in order {
                results[node] = Some(s.persist_in_storage(&b, &empty).unwrap());
            }
            let persisted = results.iter().filter(|r| **r == Some(PersistOutcome::Persisted)).count();
            assert_eq!(persisted, 1);
            assert_eq!(results[order[0]], Some(PersistOutcome::Persisted));
            assert_eq!(s.stats().appends, 1);
            assert!(s.is_coherent());
        }
    }

    #[test]
    fn storage_validate_requires_high_difficulty() {
        let mut s = storage();
        let hardened = block_on(s.chain(), 20);
        assert_eq!(s.storage_validate(&hardened), Ok(true));
        assert!(s.hash_table().contains(&hardened.hash().unwrap()));

        // Compute-difficulty block whose digest has between 12 and 19 leading zero bits.
        let mut weak = Block::new(s.chain().next_block_id(), s.chain().tip_hash(), 0, vec![], Difficulty::new(12).unwrap());
        let pre = weak.canonical_bytes().unwrap();
        weak.mined_nonce = (0u64..)
            .find(|&n| (12..20).contains(&hash_with_nonce(&pre, n).leading_zero_bits()))
            .unwrap();
        assert!(weak.pow_valid());
        assert!(weak.hash().unwrap().leading_zero_bits() < 20);
        assert_eq!(s.storage_validate(&weak), Ok(false));
        assert_eq!(s.chain().len(), 2);
    }

    #[test]
    fn wrong_parent_fails_storage_validation() {
        let mut s = storage();
        let mut other = Ledger::new(LedgerRole::Storage);
        other.append_block(block_on(&other, 4)).unwrap();
        let b = block_on(&other, 20);
        assert_eq!(s.storage_validate(&b), Ok(false));
        assert_eq!(s.chain().len(), 1);
    }

    #[test]
    fn validate_once_dedups() {
        let mut s = storage();
        let b = block_on(s.chain(), 20);
        assert_eq!(s.validate_once(&b), Ok(ValidateReply::Accepted));
        assert_eq!(s.validate_once(&b), Ok(ValidateReply::AlreadyStored));
        assert_eq!(s.stats().validations, 1);
    }

    #[test]
    fn snapshot_sees_persisted_blocks() {
        let mut s = storage();
        let stale = s.publish_snapshot(SimTime::ZERO);
        let b = block_on(s.chain(), 4);
        s.check_and_insert(&b).unwrap();
        let h = b.hash().unwrap();
        assert!(!stale.contains(&h));
        // A stale snapshot costs one lookup that comes back as a duplicate.
        let fresh = s.publish_snapshot(SimTime::from_micros(5));
        assert!(fresh.contains(&h));
        let accesses = s.stats().accesses;
        assert_eq!(s.persist_in_storage(&b, &stale), Ok(PersistOutcome::Duplicate));
        assert_eq!(s.stats().accesses, accesses + 1);
    }

    #[test]
    fn failed_storage_is_unavailable() {
        let mut s = storage();
        let b = block_on(s.chain(), 4);
        s.fail();
        assert_eq!(s.check_and_insert(&b), Err(StorageError::Unavailable));
        assert_eq!(s.storage_validate(&b), Err(StorageError::Unavailable));
        assert_eq!(s.repair_node(3).map(|_| ()), Err(StorageError::Unavailable));
        s.recover();
        assert_eq!(s.check_and_insert(&b), Ok(PersistOutcome::Persisted));
    }

    #[test]
    fn repaired_ledger_equals_storage() {
        let mut s = storage();
        for _ in 0..3 {
            let b = block_on(s.chain(), 4);
            s.check_and_insert(&b).unwrap();
        }
        let copy = s.repair_node(7).unwrap();
        assert!(copy.same_chain(s.chain()));
        assert_eq!(copy.role(), LedgerRole::Compute(7));
    }
}
