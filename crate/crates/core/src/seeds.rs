//! Root-seed fan-out.
//!
//! Every stage and item derives its own RNG seed as the first eight bytes of
//! `SHA-256(root_seed_le || tag_0 || 0x00 || tag_1 || 0x00 || ...)`, so
//! parallel or reordered work cannot change results.

use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, tags: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for tag in tags {
        h.update(tag.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
