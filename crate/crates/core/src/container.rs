//! Named-tensor container files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8        magic "NTCv1\0\0\0"
//! bytes 8..16       u64 header length L
//! bytes 16..16+L    UTF-8 JSON: name -> {"dtype","shape","offset","nbytes"}
//! bytes 16+L..      payload; offsets are relative to its start
//! ```
//!
//! Tensors are `f32`, row-major. Reserved names of the form `__name__`
//! (for example `__config__`, `__meta__`) hold raw bytes with dtype `u8`,
//! normally a JSON document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NTCv1\0\0\0";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

/// In-memory form of a container file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    tensors: BTreeMap<String, Tensor>,
    blobs: BTreeMap<String, Vec<u8>>,
}

pub fn is_reserved(name: &str) -> bool {
    name.len() > 4 && name.starts_with("__") && name.ends_with("__")
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn insert_blob(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.blobs.insert(name.into(), bytes);
    }

    /// Stores a serializable value as a JSON blob.
    pub fn insert_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value).map_err(|e| Error::Argument(format!("serializing {name}: {e}")))?;
        self.insert_blob(name, bytes);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| FormatError::MissingWeight(name.to_string()).into())
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| FormatError::MissingWeight(name.to_string()).into())
    }

    /// Fetches a tensor and checks its shape.
    pub fn tensor_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.tensor(name)?;
        if t.shape() != shape {
            return Err(FormatError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        Ok(t)
    }

    pub fn blob(&self, name: &str) -> Result<&[u8]> {
        self.blobs
            .get(name)
            .map(|b| b.as_slice())
            .ok_or_else(|| FormatError::MissingWeight(name.to_string()).into())
    }

    pub fn json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.blob(name)?)
            .map_err(|e| FormatError::Header(format!("{name}: {e}")).into())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name) || self.blobs.contains_key(name)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        let mut payload: Vec<u8> = Vec::new();
        // one sorted pass over both kinds keeps the layout deterministic
        let mut names: Vec<&String> = self.tensors.keys().chain(self.blobs.keys()).collect();
        names.sort();
        for name in names {
            let offset = payload.len() as u64;
            let entry = if let Some(t) = self.tensors.get(name) {
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                Entry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    nbytes: (t.numel() * 4) as u64,
                }
            } else {
                let b = &self.blobs[name];
                payload.extend_from_slice(b);
                Entry {
                    dtype: "u8".into(),
                    shape: vec![b.len()],
                    offset,
                    nbytes: b.len() as u64,
                }
            };
            header.insert(name.clone(), entry);
        }
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        if bytes.len() < 16 {
            if bytes.len() >= 8 && &bytes[..8] != MAGIC {
                return Err(bad_magic(&bytes[..8]));
            }
            return Err(FormatError::Truncated {
                needed: 16,
                available: bytes.len() as u64,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(bad_magic(&bytes[..8]));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let avail = bytes.len() as u64;
        if hlen > avail - 16 {
            return Err(FormatError::Truncated {
                needed: 16 + hlen,
                available: avail,
            });
        }
        let hend = 16 + hlen as usize;
        let header: BTreeMap<String, Entry> =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| FormatError::Header(e.to_string()))?;
        let payload = &bytes[hend..];
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.len());
        let mut out = Container::new();
        for (name, e) in &header {
            let end = e
                .offset
                .checked_add(e.nbytes)
                .ok_or_else(|| FormatError::Header(format!("{name}: offset overflow")))?;
            if end > payload.len() as u64 {
                return Err(FormatError::Truncated {
                    needed: hend as u64 + end,
                    available: avail,
                });
            }
            spans.push((e.offset, end, name));
            let raw = &payload[e.offset as usize..end as usize];
            match e.dtype.as_str() {
                "f32" => {
                    let numel: usize = e.shape.iter().product();
                    if e.nbytes != numel as u64 * 4 {
                        return Err(FormatError::Header(format!(
                            "{name}: shape {:?} needs {} bytes, header says {}",
                            e.shape,
                            numel * 4,
                            e.nbytes
                        )));
                    }
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    out.tensors
                        .insert(name.clone(), Tensor::new(e.shape.clone(), data).expect("checked size"));
                }
                "u8" if is_reserved(name) => {
                    if e.shape != [e.nbytes as usize] {
                        return Err(FormatError::Header(format!("{name}: byte blob shape must be [nbytes]")));
                    }
                    out.blobs.insert(name.clone(), raw.to_vec());
                }
                other => {
                    return Err(FormatError::Dtype {
                        name: name.clone(),
                        dtype: other.to_string(),
                    })
                }
            }
        }
        spans.sort();
        for w in spans.windows(2) {
            let ((_, end_a, a), (start_b, _, b)) = (w[0], w[1]);
            if start_b < end_a {
                return Err(FormatError::Overlap {
                    first: a.to_string(),
                    second: b.to_string(),
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

fn bad_magic(found: &[u8]) -> FormatError {
    FormatError::BadMagic {
        expected: String::from_utf8_lossy(MAGIC).into_owned(),
        found: String::from_utf8_lossy(found).into_owned(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
