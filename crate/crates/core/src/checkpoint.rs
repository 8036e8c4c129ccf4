//! Checkpoint container.
//!
//! Layout: the magic `HKPT1\n`, a single-line UTF-8 JSON header mapping each
//! entry name to `{shape, offset, dtype}`, a newline, then the little-endian
//! `f64` payloads. Offsets are byte offsets from the start of the payload.
//! Entries are written in name order, so identical contents give identical
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"HKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    shape: Vec<usize>,
    offset: u64,
    dtype: String,
}

pub fn encode(entries: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in entries {
        header.insert(
            name.clone(),
            HeaderEntry {
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                dtype: "f64".into(),
            },
        );
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint("bad magic bytes".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("header is not newline-terminated".into()))?;
    let header: BTreeMap<String, HeaderEntry> = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    let payload = &rest[nl + 1..];
    let mut out = BTreeMap::new();
    let mut expected_len = 0usize;
    for (name, entry) in header {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "truncated payload: {name} needs bytes {start}..{end}, payload has {}",
                payload.len()
            )));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        expected_len += 8 * n;
        out.insert(name, t);
    }
    if expected_len != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but the header describes {expected_len}",
            payload.len()
        )));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    write_atomic(path, &encode(entries))
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("b".to_string(), Tensor::new(vec![2], vec![1.5, -0.0]).unwrap());
        m.insert("a".to_string(), Tensor::new(vec![1, 3], vec![1e-300, 2.0, 3.0]).unwrap());
        m
    }

    #[test]
    fn layout() {
        let bytes = encode(&sample());
        assert!(bytes.starts_with(b"HKPT1\n{\"a\":{\"shape\":[1,3],\"offset\":0,\"dtype\":\"f64\"}"));
        let back = decode(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"HKPT2\n{}\n").is_err());
        let mut bad = bytes.clone();
        bad[6] = b'#';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
    }
}
