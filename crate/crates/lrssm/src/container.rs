//! Single-file array container.
//!
//! Layout: 8 magic bytes, a little-endian `u64` header length, a UTF-8 JSON
//! header, then the raw little-endian payload of every array in header order.
//! The header carries free-form metadata plus one descriptor per array:
//!
//! ```json
//! {"meta": {...}, "arrays": [{"name": "y", "dtype": "f64", "shape": [200, 6]}]}
//! ```
//!
//! Decoding validates every length before touching the payload, so
//! arbitrary bytes produce an error rather than a panic or a huge allocation.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Header lengths above this are rejected outright.
pub const MAX_HEADER_BYTES: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::I64(_) => "i64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Array {
            name: name.into(),
            shape,
            data: ArrayData::F64(data),
        }
    }

    pub fn i64(name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Self {
        Array {
            name: name.into(),
            shape,
            data: ArrayData::I64(data),
        }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Array {
            name: name.into(),
            shape,
            data: ArrayData::U8(data),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            other => Err(Error::Format(format!("array `{}` is {}, expected f64", self.name, other.dtype()))),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            ArrayData::I64(v) => Ok(v),
            other => Err(Error::Format(format!("array `{}` is {}, expected i64", self.name, other.dtype()))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            ArrayData::U8(v) => Ok(v),
            other => Err(Error::Format(format!("array `{}` is {}, expected u8", self.name, other.dtype()))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Descriptor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<Descriptor>,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Container { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, array: Array) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn find(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn encode(&self, magic: &[u8; 8]) -> Result<Vec<u8>> {
        let mut descriptors = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let n = element_count(&a.shape)?;
            if n != a.data.len() {
                return Err(Error::Format(format!(
                    "array `{}` has {} elements but shape {:?}",
                    a.name,
                    a.data.len(),
                    a.shape
                )));
            }
            descriptors.push(Descriptor {
                name: a.name.clone(),
                dtype: a.data.dtype().to_string(),
                shape: a.shape.clone(),
            });
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: descriptors,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("file too short".into()));
        }
        if &bytes[..8] != magic {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER_BYTES || hlen > (bytes.len() - 16) as u64 {
            return Err(Error::Format(format!("header length {hlen} out of range")));
        }
        let hend = 16 + hlen as usize;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::Format(format!("header: {e}")))?;
        let mut payload = &bytes[hend..];
        let mut arrays = Vec::with_capacity(header.arrays.len().min(1024));
        for d in header.arrays {
            let n = element_count(&d.shape)?;
            let width = match d.dtype.as_str() {
                "f64" | "i64" => 8,
                "u8" => 1,
                other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
            };
            let nbytes = n
                .checked_mul(width)
                .filter(|b| *b <= payload.len())
                .ok_or_else(|| Error::Format(format!("array `{}` overruns the payload", d.name)))?;
            let (chunk, rest) = payload.split_at(nbytes);
            payload = rest;
            let data = match width {
                1 => ArrayData::U8(chunk.to_vec()),
                _ if d.dtype == "f64" => ArrayData::F64(
                    chunk
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                _ => ArrayData::I64(
                    chunk
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            arrays.push(Array {
                name: d.name,
                shape: d.shape,
                data,
            });
        }
        if !payload.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after payload", payload.len())));
        }
        Ok(Container {
            meta: header.meta,
            arrays,
        })
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))
}
