//! Named, derived random streams.
//!
//! Every random draw in a run comes from a stream whose seed is a hash of
//! `(seed, purpose, round, source)`, so results never depend on scheduling
//! or on how many workers execute in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives the 32-byte seed for one stream.
pub fn stream_seed(seed: u64, purpose: &str, round: u64, source: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"dept-stream-v1");
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(round.to_le_bytes());
    h.update(source.to_le_bytes());
    h.finalize().into()
}

pub fn stream(seed: u64, purpose: &str, round: u64, source: u64) -> StreamRng {
    ChaCha8Rng::from_seed(stream_seed(seed, purpose, round, source))
}

/// Derives a plain `u64` seed, for APIs that take an integer seed.
pub fn derive_u64(seed: u64, purpose: &str, round: u64, source: u64) -> u64 {
    let s = stream_seed(seed, purpose, round, source);
    u64::from_le_bytes(s[..8].try_into().expect("8 bytes"))
}
