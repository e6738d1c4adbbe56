//! The XMAR container shared by every artifact the toolkit writes.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "XMAR" | version: u32 | meta_len: u64 | meta: UTF-8 JSON | arrays...
//! ```
//!
//! `meta` is a JSON object whose `"arrays"` entry lists `{name, shape,
//! dtype}` for each array in storage order; the arrays follow as row-major
//! little-endian `f32`. Every other key is free-form metadata. Keys are
//! emitted in sorted order, so equal contents give equal bytes.

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"XMAR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not an XMAR container (bad magic bytes)")]
    BadMagic,
    #[error("unsupported XMAR format version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated: {0}")]
    Truncated(&'static str),
    #[error("metadata is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid container: {0}")]
    Invalid(String),
    #[error("missing array {0:?}")]
    MissingArray(String),
    #[error("missing or malformed metadata key {0:?}")]
    MissingMeta(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_value(&self, key: &str) -> Result<&Value, CheckpointError> {
        self.meta
            .get(key)
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str, CheckpointError> {
        self.meta_value(key)?
            .as_str()
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64, CheckpointError> {
        self.meta_value(key)?
            .as_u64()
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64, CheckpointError> {
        self.meta_value(key)?
            .as_f64()
            .ok_or_else(|| CheckpointError::MissingMeta(key.to_string()))
    }

    /// Appends an array, replacing any existing array of the same name in
    /// place.
    pub fn push_array(&mut self, name: &str, tensor: Tensor<f32>) {
        match self.arrays.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.arrays.push((name.to_string(), tensor)),
        }
    }

    pub fn array(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n == name)
    }

    pub fn arrays(&self) -> &[(String, Tensor<f32>)] {
        &self.arrays
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.meta.clone();
        let listing: Vec<Value> = self
            .arrays
            .iter()
            .map(|(name, t)| json!({ "name": name, "shape": t.shape(), "dtype": "f32" }))
            .collect();
        meta.insert("arrays".into(), Value::Array(listing));
        let meta = serde_json::to_vec(&Value::Object(meta)).expect("JSON map serializes");

        let payload: usize = self.arrays.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&end| end <= bytes.len())
            .ok_or(CheckpointError::Truncated("metadata"))?;
        let mut meta = match serde_json::from_slice(&bytes[16..meta_end])? {
            Value::Object(m) => m,
            _ => return Err(CheckpointError::Invalid("metadata is not a JSON object".into())),
        };
        let listing = match meta.remove("arrays") {
            Some(Value::Array(a)) => a,
            _ => return Err(CheckpointError::Invalid("metadata lacks an \"arrays\" list".into())),
        };

        let mut arrays = Vec::with_capacity(listing.len());
        let mut offset = meta_end;
        for entry in listing {
            let name = entry["name"]
                .as_str()
                .ok_or_else(|| CheckpointError::Invalid("array entry without name".into()))?
                .to_string();
            if entry["dtype"] != "f32" {
                return Err(CheckpointError::Invalid(format!("array {name}: unsupported dtype {}", entry["dtype"])));
            }
            let shape: Vec<usize> = entry["shape"]
                .as_array()
                .ok_or_else(|| CheckpointError::Invalid(format!("array {name}: missing shape")))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| CheckpointError::Invalid(format!("array {name}: bad shape")))?;
            let count: usize = shape.iter().product();
            let end = offset
                .checked_add(count * 4)
                .filter(|&end| end <= bytes.len())
                .ok_or(CheckpointError::Truncated("array data"))?;
            let data = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Invalid(format!("array {name}: {e}")))?;
            arrays.push((name, tensor));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Invalid(format!(
                "{} trailing bytes after the last array",
                bytes.len() - offset
            )));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("seed", 7);
        ck.set_meta("arch", "small-cnn");
        ck.push_array("w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        ck.push_array("b", Tensor::new(vec![3], vec![0.5, 0.25, -1.0]).unwrap());
        ck
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"XMAR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta: Value = serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
        assert_eq!(meta["arrays"][0]["name"], "w");
        assert_eq!(meta["arrays"][1]["shape"], json!([3]));
        assert_eq!(bytes.len(), 16 + meta_len + 7 * 4);
        let first = f32::from_le_bytes(bytes[16 + meta_len..20 + meta_len].try_into().unwrap());
        assert_eq!(first, 1.0);
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta_str("arch").unwrap(), "small-cnn");
        assert_eq!(back.array("b").unwrap().data(), &[0.5, 0.25, -1.0]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_version),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }
}
