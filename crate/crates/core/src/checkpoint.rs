//! Versioned binary tensor container used for model and prompt checkpoints.
//!
//! Layout (little-endian, values encoded exactly as in feature files):
//!
//! ```text
//! magic   b"MMC1"
//! u32     version (= 1)
//! u32     config length, then that many bytes of UTF-8 JSON
//! u32     tensor count
//! per tensor:
//!   u32   name length, name bytes (UTF-8)
//!   u32   rows, u32 cols
//!   f32   rows·cols values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::dataset::DatasetError;
use crate::numerics::Matrix;

pub const CONTAINER_MAGIC: &[u8; 4] = b"MMC1";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorContainer {
    /// JSON document describing how the tensors were produced.
    pub config: String,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl TensorContainer {
    pub fn new(config: String) -> Self {
        Self {
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Matrix<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<f32>, DatasetError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DatasetError::MissingTensor(name.to_string()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        put_u32(&mut out, CONTAINER_VERSION);
        put_u32(&mut out, self.config.len() as u32);
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows() as u32);
            put_u32(&mut out, t.cols() as u32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CONTAINER_MAGIC {
            return Err(DatasetError::BadMagic {
                expected: *CONTAINER_MAGIC,
                found: magic.try_into().expect("4 bytes"),
            });
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(DatasetError::UnsupportedVersion(version));
        }
        let config_len = r.u32()? as usize;
        let config = r.string(config_len)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| DatasetError::InvalidContainer(format!("tensor {name:?} too large")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Matrix::new(rows, cols, data).expect("length checked")));
        }
        if r.pos != bytes.len() {
            return Err(DatasetError::TrailingBytes {
                expected: r.pos,
                found: bytes.len(),
            });
        }
        Ok(Self { config, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| DatasetError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.at(path))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(DatasetError::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String, DatasetError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| DatasetError::InvalidContainer("name or config is not UTF-8".into()))
    }
}
