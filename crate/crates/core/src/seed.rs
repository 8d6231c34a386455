//! Child-seed derivation.
//!
//! Every random draw in a run comes from a generator seeded by
//! [`derive`]`(master, purpose, node, counter)`. The mapping is a SHA-256 of a
//! fixed-layout byte string, so it is stable across platforms and easy to
//! reproduce outside Rust.

use sha2::{Digest, Sha256};

/// What a derived seed is used for. The discriminant is part of the hashed
/// layout and must not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Data = 0,
    Train = 1,
    Poison = 2,
    Genesis = 3,
}

/// Derives a child seed: the first eight bytes (little-endian) of
/// `SHA-256(master_le || purpose || node_le || counter_le)`.
pub fn derive(master: u64, purpose: Purpose, node: u32, counter: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([purpose as u8]);
    hasher.update(node.to_le_bytes());
    hasher.update(counter.to_le_bytes());
    let out = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&out[..8]);
    u64::from_le_bytes(first)
}
