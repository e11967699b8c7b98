//! Blocks, transactions and hash-linked chains.
//!
//! The canonical byte layouts here are normative: every field is fixed width
//! and big-endian so that a block hash is identical on every platform.
//!
//! ```text
//! txn   = txnID(8) | senderID(4) | receiverID(4) | creationTime(8) | txnAmount(8)
//! block = blockID(8) | parentBlockHash(32) | creationTime(8) | txnCounter(4)
//!         | txn* | puzzleDifficulty(4)
//! hash  = SHA-256(block | minedNonce(8))
//! ```
//!
//! `receiveTime` is replica-local and never part of a pre-image.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;

use sha2::{Digest, Sha256};

use crate::pow::{self, Difficulty};

pub type NodeId = u32;

/// Encoded length of one transaction.
pub const TXN_BYTES: usize = 32;
/// Encoded length of a block with no transactions.
pub const BLOCK_HEADER_BYTES: usize = 56;

/// SHA-256 digest identifying a block.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BlockHash(pub [u8; 32]);

impl BlockHash {
    pub const ZERO: BlockHash = BlockHash([0; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// First eight bytes as a big-endian integer; handy for compact log digests.
    pub fn prefix_u64(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_be_bytes(b)
    }

    pub fn leading_zero_bits(&self) -> u32 {
        pow::leading_zero_bits(&self.0)
    }
}

impl fmt::Debug for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockHash(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl fmt::Display for BlockHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub txn_id: u64,
    pub sender_id: NodeId,
    pub receiver_id: NodeId,
    /// Microseconds.
    pub creation_time: u64,
    /// Microseconds; set once by the replica that receives the transaction.
    pub receive_time: Option<u64>,
    pub txn_amount: u64,
}

impl Transaction {
    pub fn new(txn_id: u64, sender_id: NodeId, receiver_id: NodeId, creation_time: u64, txn_amount: u64) -> Self {
        Transaction { txn_id, sender_id, receiver_id, creation_time, receive_time: None, txn_amount }
    }

    pub fn canonical_bytes(&self) -> [u8; TXN_BYTES] {
        let mut out = [0u8; TXN_BYTES];
        out[0..8].copy_from_slice(&self.txn_id.to_be_bytes());
        out[8..12].copy_from_slice(&self.sender_id.to_be_bytes());
        out[12..16].copy_from_slice(&self.receiver_id.to_be_bytes());
        out[16..24].copy_from_slice(&self.creation_time.to_be_bytes());
        out[24..32].copy_from_slice(&self.txn_amount.to_be_bytes());
        out
    }

    /// Inverse of [`Transaction::canonical_bytes`]; `receive_time` comes back unset.
    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        if bytes.len() != TXN_BYTES {
            return Err(LedgerError::Truncated { expected: TXN_BYTES, found: bytes.len() });
        }
        Ok(Transaction {
            txn_id: be_u64(&bytes[0..8]),
            sender_id: be_u32(&bytes[8..12]),
            receiver_id: be_u32(&bytes[12..16]),
            creation_time: be_u64(&bytes[16..24]),
            receive_time: None,
            txn_amount: be_u64(&bytes[24..32]),
        })
    }

    /// The well-formedness rules a replica can check locally.
    pub fn is_well_formed(&self) -> bool {
        self.sender_id != self.receiver_id && self.receive_time.is_none_or(|r| self.creation_time <= r)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub block_id: u64,
    pub parent_block_hash: BlockHash,
    pub creation_time: u64,
    /// Replica-local, excluded from hashing.
    pub receive_time: Option<u64>,
    pub txn_counter: u32,
    pub txn_list: Vec<Transaction>,
    pub puzzle_difficulty: u32,
    pub mined_nonce: u64,
}

impl Block {
    /// An unmined block carrying `txns` on top of `parent`.
    pub fn new(block_id: u64, parent: BlockHash, creation_time: u64, txns: Vec<Transaction>, difficulty: Difficulty) -> Self {
        Block {
            block_id,
            parent_block_hash: parent,
            creation_time,
            receive_time: None,
            txn_counter: txns.len() as u32,
            txn_list: txns,
            puzzle_difficulty: difficulty.bits(),
            mined_nonce: 0,
        }
    }

    /// blockID 0, zero parent, no transactions, difficulty 0, nonce 0.
    pub fn genesis() -> Self {
        Block::new(0, BlockHash::ZERO, 0, Vec::new(), Difficulty::ZERO)
    }

    pub fn difficulty(&self) -> Difficulty {
        Difficulty::saturating(self.puzzle_difficulty)
    }

    pub fn canonical_bytes(&self) -> Result<Vec<u8>, LedgerError> {
        if self.txn_counter as usize != self.txn_list.len() {
            return Err(LedgerError::CounterMismatch { counter: self.txn_counter, actual: self.txn_list.len() });
        }
        let mut out = Vec::with_capacity(BLOCK_HEADER_BYTES + TXN_BYTES * self.txn_list.len());
        out.extend_from_slice(&self.block_id.to_be_bytes());
        out.extend_from_slice(self.parent_block_hash.as_bytes());
        out.extend_from_slice(&self.creation_time.to_be_bytes());
        out.extend_from_slice(&self.txn_counter.to_be_bytes());
        for txn in &self.txn_list {
            out.extend_from_slice(&txn.canonical_bytes());
        }
        out.extend_from_slice(&self.puzzle_difficulty.to_be_bytes());
        Ok(out)
    }

    pub fn hash(&self) -> Result<BlockHash, LedgerError> {
        let pre = self.canonical_bytes()?;
        Ok(hash_with_nonce(&pre, self.mined_nonce))
    }

    /// Does the stored nonce satisfy the block's own declared difficulty?
    pub fn pow_valid(&self) -> bool {
        match self.canonical_bytes() {
            Ok(pre) => pow::verify_nonce(&pre, self.mined_nonce, self.difficulty()),
            Err(_) => false,
        }
    }

    /// Canonical bytes followed by the nonce; the unit shipped between replicas.
    pub fn wire_bytes(&self) -> Result<Vec<u8>, LedgerError> {
        let mut out = self.canonical_bytes()?;
        out.extend_from_slice(&self.mined_nonce.to_be_bytes());
        Ok(out)
    }

    /// Inverse of [`Block::wire_bytes`]. Receive times come back unset.
    pub fn decode_wire(bytes: &[u8]) -> Result<Self, LedgerError> {
        const FIXED: usize = BLOCK_HEADER_BYTES + 8;
        if bytes.len() < FIXED {
            return Err(LedgerError::Truncated { expected: FIXED, found: bytes.len() });
        }
        let block_id = be_u64(&bytes[0..8]);
        let mut parent = [0u8; 32];
        parent.copy_from_slice(&bytes[8..40]);
        let creation_time = be_u64(&bytes[40..48]);
        let txn_counter = be_u32(&bytes[48..52]);
        let expected = FIXED + TXN_BYTES * txn_counter as usize;
        if bytes.len() != expected {
            return Err(LedgerError::Truncated { expected, found: bytes.len() });
        }
        let mut txn_list = Vec::with_capacity(txn_counter as usize);
        let mut at = 52;
        for _ in 0..txn_counter {
            txn_list.push(Transaction::decode(&bytes[at..at + TXN_BYTES])?);
            at += TXN_BYTES;
        }
        let puzzle_difficulty = be_u32(&bytes[at..at + 4]);
        let mined_nonce = be_u64(&bytes[at + 4..at + 12]);
        Ok(Block {
            block_id,
            parent_block_hash: BlockHash(parent),
            creation_time,
            receive_time: None,
            txn_counter,
            txn_list,
            puzzle_difficulty,
            mined_nonce,
        })
    }

    /// Stamp this replica's receive time on the block and its transactions.
    pub fn mark_received(&mut self, now_us: u64) {
        self.receive_time.get_or_insert(now_us);
        for txn in &mut self.txn_list {
            txn.receive_time.get_or_insert(now_us.max(txn.creation_time));
        }
    }

    /// Equality over everything that is hashed plus the nonce.
    pub fn same_identity(&self, other: &Block) -> bool {
        self.wire_bytes().ok() == other.wire_bytes().ok()
    }
}

impl AsRef<Block> for Block {
    fn as_ref(&self) -> &Block {
        self
    }
}

pub fn hash_with_nonce(preimage: &[u8], nonce: u64) -> BlockHash {
    let mut h = Sha256::new();
    h.update(preimage);
    h.update(nonce.to_be_bytes());
    BlockHash(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("txnCounter {counter} does not match {actual} listed transactions")]
    CounterMismatch { counter: u32, actual: usize },
    #[error("expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AppendError {
    #[error("block {0:?} is already in the chain")]
    Duplicate(BlockHash),
    #[error("parent {found:?} does not match tip {tip:?}")]
    WrongParent { tip: BlockHash, found: BlockHash },
    #[error("blockID {found} does not follow tip id {tip}")]
    NonIncreasingId { tip: u64, found: u64 },
    #[error("nonce does not satisfy difficulty {0}")]
    InvalidPow(u32),
    #[error(transparent)]
    Malformed(#[from] LedgerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LedgerRole {
    Compute(NodeId),
    Storage,
}

/// An append-only chain replica that always starts at genesis.
#[derive(Clone, Debug)]
pub struct Ledger {
    role: LedgerRole,
    blocks: Vec<Block>,
    hashes: Vec<BlockHash>,
    index: BTreeMap<BlockHash, usize>,
}

impl Ledger {
    pub fn new(role: LedgerRole) -> Self {
        Ledger::from_blocks_unchecked(role, alloc::vec![Block::genesis()])
    }

    /// Wrap an arbitrary block sequence without validating it; see [`Ledger::verify_chain`].
    pub fn from_blocks_unchecked(role: LedgerRole, blocks: Vec<Block>) -> Self {
        let hashes: Vec<BlockHash> = blocks.iter().map(|b| b.hash().unwrap_or(BlockHash::ZERO)).collect();
        let index = hashes.iter().enumerate().map(|(i, h)| (*h, i)).collect();
        Ledger { role, blocks, hashes, index }
    }

    pub fn role(&self) -> LedgerRole {
        self.role
    }

    /// Same chain, different owner; used when a node is repaired from storage.
    pub fn with_role(mut self, role: LedgerRole) -> Self {
        self.role = role;
        self
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn hashes(&self) -> &[BlockHash] {
        &self.hashes
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn tip(&self) -> Option<&Block> {
        self.blocks.last()
    }

    pub fn tip_hash(&self) -> BlockHash {
        self.hashes.last().copied().unwrap_or(BlockHash::ZERO)
    }

    /// blockID for a block appended on top of the current tip.
    pub fn next_block_id(&self) -> u64 {
        self.tip().map_or(0, |b| b.block_id + 1)
    }

    pub fn contains(&self, hash: &BlockHash) -> bool {
        self.index.contains_key(hash)
    }

    /// Check linkage, id order and PoW of `block` against the tip without appending.
    pub fn check_successor(&self, block: &Block) -> Result<BlockHash, AppendError> {
        let hash = block.hash()?;
        if self.contains(&hash) {
            return Err(AppendError::Duplicate(hash));
        }
        let tip = self.tip_hash();
        if block.parent_block_hash != tip {
            return Err(AppendError::WrongParent { tip, found: block.parent_block_hash });
        }
        if let Some(t) = self.tip() {
            if block.block_id <= t.block_id {
                return Err(AppendError::NonIncreasingId { tip: t.block_id, found: block.block_id });
            }
        }
        if !hash_meets(&hash, block.puzzle_difficulty) {
            return Err(AppendError::InvalidPow(block.puzzle_difficulty));
        }
        Ok(hash)
    }

    pub fn append_block(&mut self, block: Block) -> Result<BlockHash, AppendError> {
        let hash = self.check_successor(&block)?;
        self.index.insert(hash, self.blocks.len());
        self.hashes.push(hash);
        self.blocks.push(block);
        Ok(hash)
    }

    /// Recomputes every hash from scratch; cached hashes are not trusted.
    pub fn verify_chain(&self) -> bool {
        verify_blocks(&self.blocks)
    }

    /// Chain equality over hashed content and nonces; receive times are ignored.
    pub fn same_chain(&self, other: &Ledger) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.same_identity(b))
    }
}

/// True iff the sequence is hash-linked, ids strictly increase, and every PoW holds.
pub fn verify_blocks(blocks: &[Block]) -> bool {
    let mut prev: Option<(BlockHash, u64)> = None;
    for block in blocks {
        let Ok(hash) = block.hash() else { return false };
        if !hash_meets(&hash, block.puzzle_difficulty) {
            return false;
        }
        if let Some((prev_hash, prev_id)) = prev {
            if block.parent_block_hash != prev_hash || block.block_id <= prev_id {
                return false;
            }
        }
        prev = Some((hash, block.block_id));
    }
    true
}

fn hash_meets(hash: &BlockHash, bits: u32) -> bool {
    bits <= 256 && hash.leading_zero_bits() >= bits
}

fn be_u64(b: &[u8]) -> u64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(b);
    u64::from_be_bytes(a)
}

fn be_u32(b: &[u8]) -> u32 {
    let mut a = [0u8; 4];
    a.copy_from_slice(b);
    u32::from_be_bytes(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pow;
    use alloc::vec;
    use proptest::prelude::*;

    /// Independent big-endian encoder: shifts, no `to_be_bytes`.
    fn hand_encode(fields: &[(u64, usize)]) -> Vec<u8> {
        let mut out = Vec::new();
        for &(v, width) in fields {
            for i in (0..width).rev() {
                out.push((v >> (8 * i)) as u8);
            }
        }
        out
    }

    fn mined(block: Block) -> Block {
        let mut b = block;
        let pre = b.canonical_bytes().unwrap();
        b.mined_nonce = pow::mine(&pre, b.difficulty(), 0).unwrap().nonce;
        b
    }

    fn chain_of(n: usize, bits: u32) -> Ledger {
        let mut l = Ledger::new(LedgerRole::Storage);
        for i in 0..n {
            let txns = vec![Transaction::new(i as u64, 0, 1, 10 * i as u64, 5)];
            let b = mined(Block::new(l.next_block_id(), l.tip_hash(), i as u64, txns, Difficulty::new(bits).unwrap()));
            l.append_block(b).unwrap();
        }
        l
    }

    #[test]
    fn zero_txn_encodes_to_zero_bytes() {
        assert_eq!(Transaction::new(0, 0, 0, 0, 0).canonical_bytes(), [0u8; 32]);
    }

    #[test]
    fn txn_id_is_big_endian() {
        let b = Transaction::new(1, 0, 0, 0, 0).canonical_bytes();
        assert_eq!(b[7], 1);
        assert!(b[..7].iter().all(|&x| x == 0));
        assert!(b[8..].iter().all(|&x| x == 0));
    }

    #[test]
    fn txn_matches_hand_encoder() {
        let t = Transaction::new(7, 2, 3, 1000, 50);
        let expected = hand_encode(&[(7, 8), (2, 4), (3, 4), (1000, 8), (50, 8)]);
        assert_eq!(t.canonical_bytes().to_vec(), expected);
    }

    #[test]
    fn genesis_is_56_bytes() {
        let g = Block::genesis().canonical_bytes().unwrap();
        assert_eq!(g.len(), BLOCK_HEADER_BYTES);
        assert!(g.iter().all(|&x| x == 0));
    }

    #[test]
    fn four_txn_block_is_184_bytes() {
        let txns = (0..4).map(|i| Transaction::new(i, 1, 2, 3, 4)).collect();
        let b = Block::new(1, BlockHash::ZERO, 9, txns, Difficulty::new(12).unwrap());
        assert_eq!(b.canonical_bytes().unwrap().len(), 56 + 4 * 32);
    }

    #[test]
    fn block_layout_matches_hand_encoder() {
        let t = Transaction::new(7, 2, 3, 1000, 50);
        let parent = BlockHash([0xab; 32]);
        let b = Block::new(5, parent, 77, vec![t.clone()], Difficulty::new(12).unwrap());
        let mut expected = hand_encode(&[(5, 8)]);
        expected.extend_from_slice(&[0xab; 32]);
        expected.extend(hand_encode(&[(77, 8), (1, 4)]));
        expected.extend(hand_encode(&[(7, 8), (2, 4), (3, 4), (1000, 8), (50, 8)]));
        expected.extend(hand_encode(&[(12, 4)]));
        assert_eq!(b.canonical_bytes().unwrap(), expected);
    }

    #[test]
    fn receive_time_is_not_serialized() {
        let txns = vec![Transaction::new(1, 1, 2, 3, 4)];
        let a = Block::new(1, BlockHash::ZERO, 9, txns, Difficulty::ZERO);
        let mut b = a.clone();
        b.mark_received(12345);
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn counter_mismatch_is_an_integrity_error() {
        let mut b = Block::genesis();
        b.txn_counter = 2;
        assert_eq!(b.canonical_bytes(), Err(LedgerError::CounterMismatch { counter: 2, actual: 0 }));
    }

    #[test]
    fn genesis_digest_matches_external_sha256() {
        // sha256 of 64 zero bytes, computed with coreutils `sha256sum`.
        let expected = "f5a5fd42d16a20302798ef6ed309979b43003d2320d9f0e8ea9831a92759fb4b";
        assert_eq!(alloc::format!("{}", Block::genesis().hash().unwrap()), expected);
    }

    #[test]
    fn hash_is_deterministic_and_sensitive() {
        let txns = vec![Transaction::new(1, 1, 2, 3, 4)];
        let a = Block::new(1, BlockHash::ZERO, 9, txns, Difficulty::ZERO);
        assert_eq!(a.hash(), a.hash());
        let mut b = a.clone();
        b.txn_list[0].txn_amount ^= 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn append_valid_successor() {
        let mut l = Ledger::new(LedgerRole::Compute(0));
        let b = mined(Block::new(1, l.tip_hash(), 1, vec![], Difficulty::new(8).unwrap()));
        l.append_block(b).unwrap();
        assert_eq!(l.len(), 2);
    }

    #[test]
    fn append_rejects_wrong_parent() {
        let mut l = Ledger::new(LedgerRole::Compute(0));
        let b = mined(Block::new(1, BlockHash([1; 32]), 1, vec![], Difficulty::new(4).unwrap()));
        assert!(matches!(l.append_block(b), Err(AppendError::WrongParent { .. })));
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn append_rejects_bad_pow() {
        let mut l = Ledger::new(LedgerRole::Compute(0));
        let mut b = Block::new(1, l.tip_hash(), 1, vec![], Difficulty::new(16).unwrap());
        let pre = b.canonical_bytes().unwrap();
        // First nonce that misses 16 bits.
        b.mined_nonce = (0..).find(|&n| hash_with_nonce(&pre, n).leading_zero_bits() < 16).unwrap();
        assert_eq!(l.append_block(b), Err(AppendError::InvalidPow(16)));
    }

    #[test]
    fn replay_is_rejected_as_duplicate() {
        let mut once = Ledger::new(LedgerRole::Compute(0));
        let b = mined(Block::new(1, once.tip_hash(), 1, vec![], Difficulty::new(4).unwrap()));
        once.append_block(b.clone()).unwrap();
        let snapshot = once.clone();
        assert!(matches!(once.append_block(b), Err(AppendError::Duplicate(_))));
        assert!(once.same_chain(&snapshot));
    }

    #[test]
    fn genesis_only_and_empty_are_valid() {
        assert!(Ledger::new(LedgerRole::Storage).verify_chain());
        assert!(verify_blocks(&[]));
    }

    #[test]
    fn corrupted_middle_block_fails_verification() {
        let l = chain_of(5, 4);
        assert!(l.verify_chain());
        let mut blocks = l.blocks().to_vec();
        blocks[2].txn_list[0].txn_amount += 1;
        assert!(!Ledger::from_blocks_unchecked(LedgerRole::Storage, blocks).verify_chain());
    }

    fn arb_txn() -> impl Strategy<Value = Transaction> {
        (any::<u64>(), any::<u32>(), any::<u32>(), any::<u64>(), any::<u64>())
            .prop_map(|(id, s, r, c, a)| Transaction::new(id, s, r, c, a))
    }

    proptest! {
        #[test]
        fn txn_roundtrip(t in arb_txn()) {
            prop_assert_eq!(Transaction::decode(&t.canonical_bytes()).unwrap(), t);
        }

        #[test]
        fn block_roundtrip(id in any::<u64>(), parent in any::<[u8; 32]>(), ct in any::<u64>(),
                           txns in proptest::collection::vec(arb_txn(), 0..8),
                           bits in 0u32..=256, nonce in any::<u64>()) {
            let mut b = Block::new(id, BlockHash(parent), ct, txns, Difficulty::new(bits).unwrap());
            b.mined_nonce = nonce;
            prop_assert_eq!(Block::decode_wire(&b.wire_bytes().unwrap()).unwrap(), b);
        }

        #[test]
        fn prefixes_of_valid_chains_are_valid(len in 0usize..6) {
            let l = chain_of(len, 2);
            for k in 0..=l.len() {
                prop_assert!(verify_blocks(&l.blocks()[..k]));
            }
        }

        #[test]
        fn append_preserves_validity(parent_is_tip in any::<bool>(), bits in 0u32..6, nonce in 0u64..64, id_bump in 0u64..3) {
            let mut l = chain_of(3, 2);
            let parent = if parent_is_tip { l.tip_hash() } else { BlockHash([9; 32]) };
            let mut b = Block::new(l.next_block_id() + id_bump - 1, parent, 0, vec![], Difficulty::new(bits).unwrap());
            b.mined_nonce = nonce;
            let before = l.len();
            let res = l.append_block(b);
            prop_assert!(l.verify_chain());
            prop_assert_eq!(l.len(), before + usize::from(res.is_ok()));
        }
    }
}
