//! Stable content hashing helpers shared across the pipeline.
//!
//! Everything that needs an identifier or a reproducible RNG stream derives it
//! from SHA-256 over canonical bytes, so reruns with the same inputs produce
//! byte-identical artifacts.

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Derive a 64-bit seed from an arbitrary list of string parts.
///
/// Parts are length-prefixed before hashing so `["ab","c"]` and `["a","bc"]`
/// map to different seeds.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Derive a fixed number of raw bytes from string parts (used to fold step
/// contexts into token prefixes).
pub fn derive_bytes(parts: &[&str], n: usize) -> Vec<u8> {
    assert!(n <= 32, "at most one digest worth of bytes");
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.finalize()[..n].to_vec()
}
