//! Canonical JSON: object keys sorted lexicographically, no insignificant
//! whitespace, UTF-8. Every signed or hashed structure goes through here.

use alloc::string::String;
use alloc::vec::Vec;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::crypto::{self, Digest32};

/// Canonical bytes of any serializable value.
///
/// Routing through [`Value`] sorts every object's keys (the map type is a
/// `BTreeMap` because `preserve_order` is never enabled), including keys of
/// nested `Value` payloads.
pub fn to_vec<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("canonical values contain only string keys");
    serde_json::to_vec(&v).expect("Value serialization cannot fail")
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(to_vec(value)).expect("serde_json emits UTF-8")
}

pub fn hash<T: Serialize + ?Sized>(value: &T) -> Digest32 {
    crypto::hash(&to_vec(value))
}

pub fn from_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}

/// Re-encodes arbitrary JSON text canonically.
pub fn canonicalize(bytes: &[u8]) -> Result<Vec<u8>, serde_json::Error> {
    let v: Value = serde_json::from_slice(bytes)?;
    Ok(to_vec(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use serde::Serialize;

    #[derive(Serialize)]
    struct Unsorted {
        zeta: u8,
        alpha: &'static str,
        mid: Value,
    }

    #[test]
    fn keys_sorted_and_compact() {
        let v = Unsorted { zeta: 1, alpha: "a", mid: serde_json::json!({"y": 1, "b": [1, 2]}) };
        assert_eq!(to_string(&v), r#"{"alpha":"a","mid":{"b":[1,2],"y":1},"zeta":1}"#);
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let once = canonicalize(br#"{ "b" : 1, "a" : { "d": true, "c": null } }"#).unwrap();
        assert_eq!(once, br#"{"a":{"c":null,"d":true},"b":1}"#);
        assert_eq!(canonicalize(&once).unwrap(), once);
    }

    #[test]
    fn equal_maps_hash_equal_regardless_of_insertion_order() {
        let mut a = BTreeMap::new();
        a.insert("x", 1);
        a.insert("a", 2);
        let mut b = BTreeMap::new();
        b.insert("a", 2);
        b.insert("x", 1);
        assert_eq!(hash(&a), hash(&b));
    }
}
