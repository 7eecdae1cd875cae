//! Keyed random streams. Every (seed, replication, group) triple maps to its
//! own ChaCha stream, so results do not depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Random stream for one group of one replication.
pub fn stream(seed: u64, replication: u64, group: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replication.to_le_bytes());
    key[16..24].copy_from_slice(&group.to_le_bytes());
    key[24..32].copy_from_slice(b"peerlink");
    ChaCha8Rng::from_seed(key)
}
