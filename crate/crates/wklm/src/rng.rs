//! Deterministic seeded randomness with named substreams.
//!
//! Every random decision in the pipeline flows from a single `u64` seed via
//! named substreams, so corpus builds, training runs and probes replay
//! byte-identically. Substream keys are hashed with SHA-256, which keeps
//! streams independent of each other and of the order they are created in.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// The RNG used throughout the pipeline.
pub type Stream = ChaCha12Rng;

/// Derive an independent RNG from a root seed and a path of substream names.
///
/// The same `(seed, parts)` pair always yields the same stream, regardless of
/// platform or of any other streams derived from the seed.
pub fn substream(seed: u64, parts: &[&str]) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for part in parts {
        hasher.update([0x1f]); // unit separator between path components
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
