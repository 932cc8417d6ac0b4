//! Content hashing used for every stable identifier in the pipeline.

use sha2::{Digest, Sha256};

/// Name recorded in manifests next to every content hash.
pub const HASH_ALGORITHM: &str = "sha256";

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// 128-bit identifier derived from several fields. Parts are length-prefixed
/// so `("ab", "c")` and `("a", "bc")` never collide.
pub fn short_id(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}
