//! Deterministic derivation of independent RNG streams from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a ChaCha20 stream from `seed`, a domain label and a list of indices.
///
/// Distinct `(label, indices)` pairs give statistically independent streams, so
/// per-node work can run in any order (or in parallel) without changing results.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    ChaCha20Rng::from_seed(h.finalize().into())
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}
