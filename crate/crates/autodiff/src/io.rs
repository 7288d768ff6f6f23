//! Named-tensor container.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the raw payload of little-endian `f64` values. The header lists every
//! tensor as `{name, shape, dtype: "f64", offset}` with `offset` in bytes from
//! the start of the payload, plus a free-form `meta` object.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| bad("truncated header length"))?
            .try_into()
            .expect("8 bytes");
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER || header_len > (bytes.len() - 8) as u64 {
            return Err(bad(format!("header length {header_len} exceeds file")));
        }
        let header_end = 8 + header_len as usize;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| bad(format!("header json: {e}")))?;
        let payload = &bytes[header_end..];

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(bad(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(bad(format!(
                    "{}: offset {} does not follow previous tensor at {}",
                    e.name, e.offset, expected_offset
                )));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad(format!("{}: shape overflows", e.name)))?;
            let nbytes = count
                .checked_mul(8)
                .ok_or_else(|| bad(format!("{}: shape overflows", e.name)))?;
            let end = e
                .offset
                .checked_add(nbytes)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| bad(format!("{}: payload truncated", e.name)))?;
            let data: Vec<f64> = payload[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            debug_assert_eq!(data.len(), numel(&e.shape));
            let t = Tensor::new(&e.shape, data).map_err(|err| bad(format!("{}: {err}", e.name)))?;
            if !t.is_finite() {
                return Err(bad(format!("{}: non-finite value", e.name)));
            }
            expected_offset = end;
            tensors.push((e.name, t));
        }
        if expected_offset != payload.len() as u64 {
            return Err(bad(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}
