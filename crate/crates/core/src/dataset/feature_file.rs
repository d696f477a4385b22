//! Binary frame-feature files.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0..4    magic  b"MMF1"
//! 4..8    u32    version (= 1)
//! 8..12   u32    frames T
//! 12..16  u32    dim C
//! 16..    f32    T·C values, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{DatasetError, FrameFeatures, Modality};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"MMF1";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(values: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + values.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(values.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(values.cols() as u32).to_le_bytes());
    for v in values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], modality: Modality) -> Result<FrameFeatures, DatasetError> {
    if bytes.len() < HEADER_LEN {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: *FEATURE_MAGIC,
            found: bytes[0..4].try_into().expect("4 bytes"),
        });
    }
    let version = read_u32(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let frames = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    if frames == 0 || dim == 0 {
        return Err(DatasetError::EmptyDimension { frames, dim });
    }
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(DatasetError::EmptyDimension { frames, dim })?;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DatasetError::TrailingBytes {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let values = Matrix::new(frames, dim, data).expect("length checked above");
    FrameFeatures::new(modality, values)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn write_feature_file(path: impl AsRef<Path>, features: &FrameFeatures) -> Result<(), DatasetError> {
    let path = path.as_ref();
    fs::write(path, encode_features(&features.values)).map_err(|e| DatasetError::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>, modality: Modality) -> Result<FrameFeatures, DatasetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    decode_features(&bytes, modality).map_err(|e| e.at(path))
}
