//! Content digests used for cache keys, manifests and golden checks.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the compact JSON serialization of `value`.
///
/// Map keys of `serde_json::Value` are sorted, so values built from structs
/// with a fixed field order and from `BTreeMap`s hash stably.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    sha256_hex(serde_json::to_string(&v).expect("JSON value prints").as_bytes())
}

/// First eight bytes of a SHA-256 digest, as a big-endian integer.
pub fn digest_u64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_be_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn file_sha256(path: &std::path::Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
