//! Deterministic random streams keyed by `(seed, tag, index)`.
//!
//! Every stochastic stage draws from its own stream, so results do not depend
//! on evaluation order and a resumed run needs no generator state beyond the
//! seed and the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Child seed for a named sub-stage.
pub fn child_seed(seed: u64, tag: &str) -> u64 {
    use rand::RngCore;
    stream(seed, tag, u64::MAX).next_u64()
}
