//! Seed derivation.
//!
//! Every random stream in a run is derived from one 64-bit root seed. A stream
//! is identified by a purpose string plus a list of integer indices; its
//! ChaCha8 key is `SHA-256(le64(seed) || le64(len(purpose)) || purpose ||
//! le64(index_0) || le64(index_1) || ...)`. Streams are therefore independent
//! of evaluation order and thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: &str, indices: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}
