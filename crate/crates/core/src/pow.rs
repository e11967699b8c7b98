//! Leading-zero-bits proof-of-work over SHA-256.
//!
//! Compute nodes mine at a low difficulty; the shared storage checks the
//! fallback path at a higher one. Both use the same primitive here.

use sha2::{Digest, Sha256};

use crate::ledger::BlockHash;

/// Largest difficulty `mine` will attempt unless the caller lifts the guard.
pub const DEFAULT_MINING_GUARD: u32 = 32;

/// Required number of leading zero bits in the digest, `0..=256`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Difficulty(u32);

impl Difficulty {
    pub const ZERO: Difficulty = Difficulty(0);
    pub const MAX: Difficulty = Difficulty(256);

    pub fn new(bits: u32) -> Result<Self, PowError> {
        if bits > 256 {
            return Err(PowError::OutOfRange(bits));
        }
        Ok(Difficulty(bits))
    }

    pub(crate) fn saturating(bits: u32) -> Self {
        Difficulty(bits.min(256))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    /// Mean number of hash evaluations needed to mine at this difficulty.
    pub fn expected_attempts(self) -> f64 {
        let mut v = 1.0;
        for _ in 0..self.0 {
            v *= 2.0;
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PowProof {
    pub nonce: u64,
    pub digest: BlockHash,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PowError {
    #[error("difficulty {0} exceeds 256 bits")]
    OutOfRange(u32),
    #[error("difficulty {bits} is above the mining guard of {guard} bits")]
    AboveGuard { bits: u32, guard: u32 },
    #[error("nonce space exhausted without meeting the target")]
    Exhausted,
}

pub fn leading_zero_bits(digest: &[u8]) -> u32 {
    let mut bits = 0;
    for &b in digest {
        if b == 0 {
            bits += 8;
        } else {
            return bits + b.leading_zeros();
        }
    }
    bits
}

/// Smallest nonce `>= start_nonce` whose digest meets `difficulty`.
pub fn mine(preimage: &[u8], difficulty: Difficulty, start_nonce: u64) -> Result<PowProof, PowError> {
    mine_guarded(preimage, difficulty, start_nonce, DEFAULT_MINING_GUARD)
}

pub fn mine_guarded(preimage: &[u8], difficulty: Difficulty, start_nonce: u64, guard_bits: u32) -> Result<PowProof, PowError> {
    if difficulty.bits() > guard_bits {
        return Err(PowError::AboveGuard { bits: difficulty.bits(), guard: guard_bits });
    }
    let mut base = Sha256::new();
    base.update(preimage);
    let mut nonce = start_nonce;
    loop {
        let mut h = base.clone();
        h.update(nonce.to_be_bytes());
        let digest: [u8; 32] = h.finalize().into();
        if leading_zero_bits(&digest) >= difficulty.bits() {
            return Ok(PowProof { nonce, digest: BlockHash(digest) });
        }
        nonce = nonce.checked_add(1).ok_or(PowError::Exhausted)?;
    }
}

/// One hash evaluation: recompute, compare with the claimed digest, check the target.
pub fn verify(preimage: &[u8], proof: &PowProof, difficulty: Difficulty) -> bool {
    let digest = crate::ledger::hash_with_nonce(preimage, proof.nonce);
    digest == proof.digest && digest.leading_zero_bits() >= difficulty.bits()
}

/// As [`verify`] for callers that only hold the nonce.
pub fn verify_nonce(preimage: &[u8], nonce: u64, difficulty: Difficulty) -> bool {
    crate::ledger::hash_with_nonce(preimage, nonce).leading_zero_bits() >= difficulty.bits()
}
