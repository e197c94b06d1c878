//! Seed derivation.
//!
//! Every random decision in the pipeline is driven by a seed derived from a
//! single master seed. The split is `SHA-256(master_le ‖ tag ‖ index_le...)`,
//! truncated to the first eight bytes (little endian). Deriving instead of
//! reusing the master keeps independent stages statistically decoupled while
//! remaining fully replayable from one number.

use sha2::{Digest, Sha256};

/// Derives a purpose-specific seed from a master seed, a tag, and indices.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_across_calls() {
        assert_eq!(derive_seed(7, "trace", &[1, 2]), derive_seed(7, "trace", &[1, 2]));
    }

    #[test]
    fn tag_and_index_sensitive() {
        let base = derive_seed(7, "trace", &[1, 2]);
        assert_ne!(base, derive_seed(7, "trace", &[2, 1]));
        assert_ne!(base, derive_seed(7, "class", &[1, 2]));
        assert_ne!(base, derive_seed(8, "trace", &[1, 2]));
    }
}
