//! Canonical JSON: object keys sorted, no insignificant whitespace.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes through [`serde_json::Value`], whose maps keep keys sorted.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&v).expect("value always serializes")
}

/// Lower-case hex SHA-256 of the canonical form.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> String {
    hex::encode(Sha256::digest(canonical_json(value).as_bytes()))
}
