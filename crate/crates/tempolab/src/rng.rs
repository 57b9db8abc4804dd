//! Seed derivation for named random streams.
//!
//! All randomness in an experiment flows from one root seed. Every consumer
//! derives its own ChaCha stream from (root seed, stream name, indices), so
//! components can be re-seeded independently and a run can be resumed at any
//! step without carrying mutable generator state around: per-step decisions
//! (masking, replay draws, forget draws) are seeded from the step counter.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a generator from the root seed, a stream label, and up to three
/// integer coordinates (e.g. task, step).
pub fn stream(root: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([label.len() as u8]);
    h.update(label.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
