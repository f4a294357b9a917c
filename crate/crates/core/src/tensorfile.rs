//! Flat little-endian tensor container shared by encoder weights, feature
//! caches, datasets and pyramid checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "SFMTENSR"
//! version    u32       1
//! n_meta     u32
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! n_tensors  u32
//!   name     u32 length + UTF-8 bytes
//!   dtype    u8        0 = float32, 1 = float64
//!   ndim     u32
//!   dims     u64 * ndim
//!   data     product(dims) elements of dtype
//! ```
//!
//! The reader rejects trailing bytes and any truncation, so a partially
//! written file never produces a partially populated container.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"SFMTENSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Validation(format!("unknown dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64 regardless of the on-disk dtype.
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name,
            dtype,
            shape,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("tensor {name:?} missing from container")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Validation(format!("metadata key {key:?} missing")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta_str(key)?;
        raw.parse::<T>()
            .map_err(|_| Error::Validation(format!("metadata {key:?} has unparsable value {raw:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.dtype.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t.dtype {
                DType::F32 => {
                    for &v in &t.data {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    for &v in &t.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Validation("bad magic, not a tensor container".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Validation(format!("unsupported container version {version}")));
        }
        let n_meta = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let dtype = DType::from_tag(r.u8()?)?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Validation(format!("tensor {name}: implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Validation(format!("tensor {name}: shape overflow")))?;
            let nbytes = numel
                .checked_mul(dtype.width())
                .ok_or_else(|| Error::Validation(format!("tensor {name}: size overflow")))?;
            let raw = r.take(nbytes)?;
            let data = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
            };
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Validation(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Load(format!("no such file: {}", path.display())));
        }
        Self::from_bytes(&fsutil::read_bytes(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Validation(format!(
                    "truncated container: wanted {n} bytes at offset {}, {} available",
                    self.pos,
                    self.buf.len().saturating_sub(self.pos)
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Validation("invalid UTF-8 string".into()))
    }
}
