//! `TAXD` container: magic, version, a JSON metadata block, named tensors,
//! and a trailing CRC32 over everything before it.
//!
//! All integers are little-endian. Layout:
//! `"TAXD" u32:version u64:meta_len meta u32:count` then per tensor
//! `u32:name_len name u8:dtype u32:rank u64*rank:dims values`, then
//! `u32:crc32`.

use std::fs;
use std::io;
use std::path::Path;

use taxa_numeric::{DType, Scalar, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TAXD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor {name}: stored as {found}, expected {expected}")]
    DTypeMismatch { name: String, expected: &'static str, found: &'static str },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian values.
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        StoredTensor { name: name.into(), dtype: T::DTYPE, shape: t.shape().to_vec(), bytes: t.to_le_bytes() }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>, CheckpointError> {
        if self.dtype != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                name: self.name.clone(),
                expected: T::DTYPE.name(),
                found: self.dtype.name(),
            });
        }
        let w = T::DTYPE.size_in_bytes();
        let data = self.bytes.chunks_exact(w).map(T::read_le).collect();
        Tensor::new(&self.shape, data).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&StoredTensor, CheckpointError> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    /// Loads `name` and checks it has `shape`.
    pub fn tensor<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>, CheckpointError> {
        let st = self.get(name)?;
        if st.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: st.shape.clone(),
            });
        }
        st.to_tensor()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::CorruptHeader("bad magic".into()));
        }
        let mut r = Reader { bytes: &bytes[..bytes.len().saturating_sub(4)], pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let body_len = bytes.len() - 4;
        if body_len < 8 {
            return Err(CheckpointError::CorruptHeader("truncated".into()));
        }
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err(CheckpointError::CorruptHeader("crc mismatch".into()));
        }
        let meta_len = r.u64()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| CheckpointError::CorruptHeader("metadata is not utf-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::CorruptHeader("tensor name is not utf-8".into()))?;
            let dtype = DType::from_tag(r.take(1)?[0])
                .ok_or_else(|| CheckpointError::CorruptHeader(format!("unknown dtype for {name}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(dtype.size_in_bytes(), |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| CheckpointError::CorruptHeader(format!("shape overflow for {name}")))?;
            let bytes = r.take(n)?.to_vec();
            tensors.push(StoredTensor { name, dtype, shape, bytes });
        }
        if r.pos != r.bytes.len() {
            return Err(CheckpointError::CorruptHeader("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("taxd.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::CorruptHeader("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
