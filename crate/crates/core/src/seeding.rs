//! Stable hashing and seed derivation.
//!
//! Everything stochastic in the pipeline draws from a ChaCha stream whose seed
//! is derived here, so results are identical across processes and platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 64-bit hash of an ordered list of string parts. Parts are length-prefixed
/// so `["ab", "c"]` and `["a", "bc"]` hash differently.
pub fn stable_hash<S: AsRef<str>>(parts: &[S]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        let bytes = part.as_ref().as_bytes();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// `seed ⊕ stable_hash(label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    seed ^ stable_hash(&[label])
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
