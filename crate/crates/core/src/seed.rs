//! Deterministic seed derivation.
//!
//! Every random stream in the engine descends from one `u64` seed; each
//! component draws from its own stream so that adding draws in one place
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a component seed from a root seed and a stable tag.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// The RNG used for all seeded streams.
pub type StreamRng = ChaCha8Rng;

pub fn stream(root: u64, tag: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}
