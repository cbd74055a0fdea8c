//! Stable hashing and seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from
//! [`derive_seed`], which is FNV-1a 64 over the little-endian seed bytes
//! followed by the UTF-8 label. The mapping is platform independent.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64 of a byte string.
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(bytes);
    hasher.finish()
}

/// Derives a child seed from `(seed, label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(&seed.to_le_bytes());
    hasher.write(label.as_bytes());
    hasher.finish()
}

pub fn keyed_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
