//! Labeled deterministic RNG streams.
//!
//! All randomness derives from one root seed expanded per subsystem label
//! (e.g. "data", "g_init", "z_sample"), so each stage is independently
//! reproducible no matter what ran before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for `(root_seed, label)`.
pub fn stream(root_seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Sub-stream with an extra integer component (epoch, step, subset index).
pub fn substream(root_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    stream(root_seed, &format!("{label}.{index}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_label_separated() {
        let a1 = stream(0, "data").next_u64();
        let a2 = stream(0, "data").next_u64();
        let b = stream(0, "g_init").next_u64();
        let c = stream(1, "data").next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }
}
