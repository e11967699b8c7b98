//! Values frozen from tools outside this crate (coreutils sha256sum, Python hashlib).

use hpcledger_core::ledger::hash_with_nonce;
use hpcledger_core::pow::{self, PowProof};
use hpcledger_core::{Block, BlockHash, Difficulty, Transaction};

// `head -c 64 /dev/zero | sha256sum`
const GENESIS_DIGEST: &str = "f5a5fd42d16a20302798ef6ed309979b43003d2320d9f0e8ea9831a92759fb4b";

// Block 1 over a zero parent at t=5000 holding txn(7, 2, 3, 1000, 50), 12 bits.
const FIXTURE_PREIMAGE: &str = "0000000000000001\
0000000000000000000000000000000000000000000000000000000000000000\
0000000000001388\
00000001\
0000000000000007000000020000000300000000000003e80000000000000032\
0000000c";
// First nonce reaching 12 bits; its digest has exactly 14.
const FIXTURE_NONCE: u64 = 3505;
const FIXTURE_DIGEST: &str = "000365da11a5b4c0739a7a3741033dcaca4c54bdf3417a37706e7c5a01810a4d";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn fixture_block() -> Block {
    let t = Transaction::new(7, 2, 3, 1000, 50);
    Block::new(1, BlockHash::ZERO, 5000, vec![t], Difficulty::new(12).unwrap())
}

#[test]
fn genesis_digest_matches_sha256sum() {
    let g = Block::genesis();
    assert_eq!(g.canonical_bytes().unwrap(), vec![0u8; 56]);
    assert_eq!(hex(g.hash().unwrap().as_bytes()), GENESIS_DIGEST);
}

#[test]
fn fixture_layout_matches_python_struct() {
    assert_eq!(hex(&fixture_block().canonical_bytes().unwrap()), FIXTURE_PREIMAGE);
}

#[test]
fn four_txn_block_is_184_bytes() {
    let txns = (0..4).map(|i| Transaction::new(i, 0, 1, 0, 1)).collect();
    let b = Block::new(1, BlockHash::ZERO, 0, txns, Difficulty::ZERO);
    assert_eq!(b.canonical_bytes().unwrap().len(), 184);
}

#[test]
fn mined_fixture_matches_hashlib_search() {
    let pre = fixture_block().canonical_bytes().unwrap();
    let p = pow::mine(&pre, Difficulty::new(12).unwrap(), 0).unwrap();
    assert_eq!(p.nonce, FIXTURE_NONCE);
    assert_eq!(hex(p.digest.as_bytes()), FIXTURE_DIGEST);
}

#[test]
fn compute_fixture_fails_storage_difficulty() {
    let pre = fixture_block().canonical_bytes().unwrap();
    let proof = PowProof { nonce: FIXTURE_NONCE, digest: hash_with_nonce(&pre, FIXTURE_NONCE) };
    assert!(pow::verify(&pre, &proof, Difficulty::new(12).unwrap()));
    assert!(pow::verify(&pre, &proof, Difficulty::new(14).unwrap()));
    assert!(!pow::verify(&pre, &proof, Difficulty::new(15).unwrap()));
    assert!(!pow::verify(&pre, &proof, Difficulty::new(20).unwrap()));

    let mut b = fixture_block();
    b.mined_nonce = FIXTURE_NONCE;
    assert!(b.pow_valid());
    b.puzzle_difficulty = 20;
    assert!(!b.pow_valid());
}
