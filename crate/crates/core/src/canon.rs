//! Canonical JSON (sorted keys, pretty-printed) and content fingerprints.

use serde::Serialize;

use crate::error::Result;
use crate::seed::sha256_hex;

/// Serialise with object keys in lexicographic order. Two values that are
/// equal as JSON produce identical bytes.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn key_order_does_not_matter() {
        let a: HashMap<&str, i32> = [("b", 1), ("a", 2), ("c", 3)].into_iter().collect();
        let b: HashMap<&str, i32> = [("c", 3), ("a", 2), ("b", 1)].into_iter().collect();
        assert_eq!(canonical_json(&a).unwrap(), canonical_json(&b).unwrap());
        assert!(canonical_json(&a).unwrap().find("\"a\"").unwrap() < canonical_json(&a).unwrap().find("\"b\"").unwrap());
    }
}
