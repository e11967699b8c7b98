//! Per-node transaction queue and the outgoing/incoming block FIFOs.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::ledger::{Block, Ledger, Transaction};
use crate::pow::Difficulty;
use crate::time::{SimDuration, SimTime};

pub const DEFAULT_BLOCK_TXN_THRESHOLD: usize = 4;

/// Where a freshly encapsulated block hangs off the chain.
#[derive(Clone, Copy, Debug)]
pub struct BlockTemplate {
    pub block_id: u64,
    pub parent: crate::ledger::BlockHash,
    pub creation_time_us: u64,
    pub difficulty: Difficulty,
}

impl BlockTemplate {
    pub fn on_tip(ledger: &Ledger, creation_time_us: u64, difficulty: Difficulty) -> Self {
        BlockTemplate { block_id: ledger.next_block_id(), parent: ledger.tip_hash(), creation_time_us, difficulty }
    }

    fn build(self, txns: Vec<Transaction>) -> Block {
        Block::new(self.block_id, self.parent, self.creation_time_us, txns, self.difficulty)
    }
}

#[derive(Clone, Debug)]
pub struct TxnQueue {
    pending: VecDeque<Transaction>,
    threshold: usize,
}

impl TxnQueue {
    /// `threshold` is clamped to at least one transaction per block.
    pub fn new(threshold: usize) -> Self {
        TxnQueue { pending: VecDeque::new(), threshold: threshold.max(1) }
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Queue `txn`; once the queue holds `threshold` transactions they are
    /// drained, in order, into a new unmined block.
    pub fn submit_txn(&mut self, txn: Transaction, template: BlockTemplate) -> Option<Block> {
        self.pending.push_back(txn);
        if self.pending.len() >= self.threshold {
            let txns: Vec<Transaction> = self.pending.drain(..self.threshold).collect();
            Some(template.build(txns))
        } else {
            None
        }
    }

    /// End-of-workload flush of a partial block.
    pub fn flush(&mut self, template: BlockTemplate) -> Option<Block> {
        if self.pending.is_empty() {
            return None;
        }
        let txns: Vec<Transaction> = self.pending.drain(..).collect();
        Some(template.build(txns))
    }
}

impl Default for TxnQueue {
    fn default() -> Self {
        TxnQueue::new(DEFAULT_BLOCK_TXN_THRESHOLD)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum QueueError {
    #[error("a block is already being validated")]
    ValidationInFlight,
}

/// Outgoing and incoming FIFOs of one node. Generic so the simulator can
/// queue blocks together with their round metadata.
#[derive(Clone, Debug)]
pub struct BlockQueues<T = Block> {
    outgoing: VecDeque<T>,
    incoming: VecDeque<T>,
    pop_interval: SimDuration,
    last_pop: Option<SimTime>,
    validating: bool,
}

impl<T> BlockQueues<T> {
    pub fn new(pop_interval: SimDuration) -> Self {
        BlockQueues { outgoing: VecDeque::new(), incoming: VecDeque::new(), pop_interval, last_pop: None, validating: false }
    }

    pub fn pop_interval(&self) -> SimDuration {
        self.pop_interval
    }

    pub fn push_outgoing(&mut self, item: T) {
        self.outgoing.push_back(item);
    }

    pub fn push_incoming(&mut self, item: T) {
        self.incoming.push_back(item);
    }

    /// A node validates its own blocks too, so they go to both queues.
    pub fn push_created(&mut self, item: T)
    where
        T: Clone,
    {
        self.incoming.push_back(item.clone());
        self.outgoing.push_back(item);
    }

    /// Head of the outgoing FIFO, at most once per pop interval.
    pub fn pop_outgoing(&mut self, now: SimTime) -> Option<T> {
        if self.outgoing.is_empty() {
            return None;
        }
        if let Some(last) = self.last_pop {
            if now.saturating_since(last) < self.pop_interval {
                return None;
            }
        }
        self.last_pop = Some(now);
        self.outgoing.pop_front()
    }

    /// Earliest time `pop_outgoing` can succeed again.
    pub fn next_pop_at(&self) -> SimTime {
        self.last_pop.map_or(SimTime::ZERO, |t| t + self.pop_interval)
    }

    /// Take the next block to validate. Fails while a previous one is still in flight.
    pub fn next_incoming(&mut self) -> Result<Option<T>, QueueError> {
        if self.validating {
            return Err(QueueError::ValidationInFlight);
        }
        let next = self.incoming.pop_front();
        self.validating = next.is_some();
        Ok(next)
    }

    pub fn peek_incoming(&self) -> Option<&T> {
        self.incoming.front()
    }

    /// Drop incoming entries the caller no longer wants (e.g. stale rounds).
    pub fn retain_incoming(&mut self, keep: impl FnMut(&T) -> bool) {
        self.incoming.retain(keep);
    }

    pub fn finish_validation(&mut self) {
        self.validating = false;
    }

    pub fn is_validating(&self) -> bool {
        self.validating
    }

    pub fn outgoing_len(&self) -> usize {
        self.outgoing.len()
    }

    pub fn incoming_len(&self) -> usize {
        self.incoming.len()
    }

    pub fn clear(&mut self) {
        self.outgoing.clear();
        self.incoming.clear();
        self.validating = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::LedgerRole;
    use alloc::vec;
    use proptest::prelude::*;

    fn t(id: u64) -> Transaction {
        Transaction::new(id, 0, 1, id, 1)
    }

    fn template(l: &Ledger) -> BlockTemplate {
        BlockTemplate::on_tip(l, 0, Difficulty::new(12).unwrap())
    }

    #[test]
    fn encapsulates_at_four() {
        let l = Ledger::new(LedgerRole::Compute(0));
        let mut q = TxnQueue::default();
        for i in 0..3 {
            assert!(q.submit_txn(t(i), template(&l)).is_none());
        }
        assert_eq!(q.len(), 3);
        let b = q.submit_txn(t(3), template(&l)).unwrap();
        assert_eq!(b.txn_counter, 4);
        assert_eq!(b.txn_list.iter().map(|x| x.txn_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(b.parent_block_hash, l.tip_hash());
        assert!(q.is_empty());
    }

    #[test]
    fn threshold_one_blocks_every_txn() {
        let l = Ledger::new(LedgerRole::Compute(0));
        let mut q = TxnQueue::new(1);
        for i in 0..5 {
            assert_eq!(q.submit_txn(t(i), template(&l)).unwrap().txn_counter, 1);
        }
    }

    #[test]
    fn flush_takes_partial() {
        let l = Ledger::new(LedgerRole::Compute(0));
        let mut q = TxnQueue::default();
        q.submit_txn(t(1), template(&l));
        q.submit_txn(t(2), template(&l));
        assert_eq!(q.flush(template(&l)).unwrap().txn_counter, 2);
        assert!(q.flush(template(&l)).is_none());
    }

    #[test]
    fn pop_outgoing_respects_interval() {
        let mut q: BlockQueues<u32> = BlockQueues::new(SimDuration::from_micros(200));
        assert_eq!(q.pop_outgoing(SimTime::ZERO), None);
        q.push_outgoing(1);
        q.push_outgoing(2);
        assert_eq!(q.pop_outgoing(SimTime::from_micros(10)), Some(1));
        assert_eq!(q.pop_outgoing(SimTime::from_micros(100)), None);
        assert_eq!(q.pop_outgoing(SimTime::from_micros(210)), Some(2));
    }

    #[test]
    fn own_blocks_enter_incoming() {
        let mut q: BlockQueues<&str> = BlockQueues::new(SimDuration::ZERO);
        q.push_created("mine");
        assert_eq!(q.next_incoming(), Ok(Some("mine")));
        assert_eq!(q.pop_outgoing(SimTime::ZERO), Some("mine"));
    }

    #[test]
    fn incoming_is_one_at_a_time() {
        let mut q: BlockQueues<u32> = BlockQueues::new(SimDuration::ZERO);
        assert_eq!(q.next_incoming(), Ok(None));
        q.push_incoming(1);
        q.push_incoming(2);
        assert_eq!(q.next_incoming(), Ok(Some(1)));
        assert_eq!(q.next_incoming(), Err(QueueError::ValidationInFlight));
        q.finish_validation();
        assert_eq!(q.next_incoming(), Ok(Some(2)));
    }

    proptest! {
        // Arrival log vs pop log: local and remote blocks interleaved arbitrarily.
        #[test]
        fn incoming_preserves_arrival_order(ops in proptest::collection::vec(any::<bool>(), 0..40)) {
            let mut q: BlockQueues<(bool, usize)> = BlockQueues::new(SimDuration::ZERO);
            let mut arrivals = Vec::new();
            for (i, local) in ops.iter().enumerate() {
                if *local { q.push_created((true, i)); } else { q.push_incoming((false, i)); }
                arrivals.push((*local, i));
            }
            let mut pops = Vec::new();
            while let Some(x) = q.next_incoming().unwrap() {
                pops.push(x);
                q.finish_validation();
            }
            prop_assert_eq!(pops, arrivals);
        }

        #[test]
        fn every_txn_lands_in_exactly_one_block(n in 0u64..60, threshold in 1usize..7) {
            let l = Ledger::new(LedgerRole::Compute(0));
            let mut q = TxnQueue::new(threshold);
            let mut blocks = Vec::new();
            for i in 0..n {
                blocks.extend(q.submit_txn(t(i), template(&l)));
            }
            let last_full = blocks.len();
            blocks.extend(q.flush(template(&l)));
            let ids: Vec<u64> = blocks.iter().flat_map(|b| b.txn_list.iter().map(|x| x.txn_id)).collect();
            prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
            prop_assert!(blocks[..last_full].iter().all(|b| b.txn_counter as usize == threshold));
        }
    }
}
