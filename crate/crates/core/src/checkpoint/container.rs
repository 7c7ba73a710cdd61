// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary tensor container.
//!
//! ```text
//! [u64 LE header length][UTF-8 JSON header][f32 LE data buffer]
//! ```
//!
//! The header maps each tensor name to `{"dtype": "f32", "shape": [..],
//! "data_offsets": [begin, end)}` with offsets relative to the start of the
//! data buffer. A `__metadata__` entry, if present, is ignored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named tensor: shape plus flat row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Serializes tensors in name order.
pub fn encode(tensors: &BTreeMap<String, RawTensor>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Dimension(format!(
                "tensor `{name}` shape {:?} holds {expected} values, data has {}",
                t.shape,
                t.data.len()
            )));
        }
        let bytes = t.data.len() * 4;
        header.insert(
            name.clone(),
            HeaderEntry {
                dtype: "f32".into(),
                shape: t.shape.clone(),
                data_offsets: [offset, offset + bytes],
            },
        );
        offset += bytes;
    }
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container image, validating every offset against the buffer.
pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, RawTensor>> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, too short for the length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            Error::MalformedHeader(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let buffer = &bytes[header_end..];

    let mut tensors = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("entry `{name}`: {e}")))?;
        if entry.dtype != "f32" {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}` has unsupported dtype {}",
                entry.dtype
            )));
        }
        let [begin, end] = entry.data_offsets;
        let count: usize = entry.shape.iter().product();
        if begin > end || end > buffer.len() || end - begin != count * 4 {
            return Err(Error::MalformedHeader(format!(
                "tensor `{name}` offsets [{begin}, {end}) invalid for shape {:?} and a {}-byte buffer",
                entry.shape,
                buffer.len()
            )));
        }
        let data = buffer[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name, RawTensor::new(entry.shape, data));
    }
    Ok(tensors)
}

pub fn read(path: &Path) -> Result<BTreeMap<String, RawTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: &Path, tensors: &BTreeMap<String, RawTensor>) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, RawTensor> {
        let mut m = BTreeMap::new();
        m.insert("a".into(), RawTensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]));
        m.insert("b".into(), RawTensor::new(vec![3], vec![f32::MIN_POSITIVE, 7.0, -0.0]));
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let back = decode(&encode(&m).unwrap()).unwrap();
        for (name, t) in &m {
            let r = &back[name];
            assert_eq!(r.shape, t.shape);
            let a: Vec<u32> = r.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncation_is_malformed() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 5, 8, 20] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::MalformedHeader(_))), "cut {cut}");
        }
        // header intact, data truncated
        assert!(matches!(
            decode(&bytes[..bytes.len() - 4]),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn rejects_other_dtypes_and_ignores_metadata() {
        let header = br#"{"__metadata__":{"format":"x"},"t":{"dtype":"f16","shape":[1],"data_offsets":[0,2]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(decode(&bytes), Err(Error::MalformedHeader(_))));

        let header = br#"{"__metadata__":{"format":"x"}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        assert!(decode(&bytes).unwrap().is_empty());
    }
}
