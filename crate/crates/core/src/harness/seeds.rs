//! Named seed streams.
//!
//! A master seed fans out by hashing: `seed(stream) = first 8 bytes (LE) of
//! SHA-256(master as LE bytes || stream name)`.

use sha2::{Digest, Sha256};

pub const DATA: &str = "data";
pub const ENCODER: &str = "encoder";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const BASELINE: &str = "baseline";
pub const STORE: &str = "store";
pub const MODEL: &str = "model";
pub const GENERATOR: &str = "generator";
pub const PROBE: &str = "probe";

pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
