use std::path::Path;

use crate::error::{PcError, Result};
use crate::linalg::Vector;

/// Unsigned-byte IDX payload with its shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 255 {
            return Err(PcError::Argument("IDX tensors have 1 to 255 dimensions".into()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(PcError::Shape(format!("shape {shape:?} holds {n} bytes, got {}", data.len())));
        }
        Ok(IdxTensor { shape, data })
    }

    /// Items along the first axis.
    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    /// Bytes per item (product of the trailing dimensions).
    pub fn item_size(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// One flattened vector per item, scaled to `[0, 1]`.
    pub fn scaled_items(&self) -> Vec<Vector> {
        let k = self.item_size();
        self.data
            .chunks(k.max(1))
            .take(self.len())
            .map(|c| Vector::from_iterator(k, c.iter().map(|&b| b as f64 / 255.0)))
            .collect()
    }

    /// The payload read as class indices (for 1-D label files).
    pub fn labels(&self) -> Result<Vec<usize>> {
        if self.shape.len() != 1 {
            return Err(PcError::Shape(format!("label files are 1-D, got shape {:?}", self.shape)));
        }
        Ok(self.data.iter().map(|&b| b as usize).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0, 0, 0x08, self.shape.len() as u8];
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> PcError {
    PcError::Format { offset: offset as u64, message: message.into() }
}

/// Parses an IDX byte stream: two zero bytes, type `0x08`, a dimension count,
/// big-endian `u32` sizes, then the row-major payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if let Some(i) = (0..2).find(|&i| bytes[i] != 0) {
        return Err(format_err(i, format!("magic byte {:#04x}, expected 0x00", bytes[i])));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(2, format!("type byte {:#04x}, only 0x08 (unsigned byte) is supported", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(format_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err(bytes.len(), "truncated dimension sizes"));
    }
    let shape: Vec<usize> = (0..ndims)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err(4, "shape overflows"))?;
    let payload = &bytes[header..];
    if payload.len() != n {
        let at = header + payload.len().min(n);
        return Err(format_err(at, format!("payload has {} bytes, shape {shape:?} needs {n}", payload.len())));
    }
    Ok(IdxTensor { shape, data: payload.to_vec() })
}

pub fn load_idx(path: &Path) -> Result<IdxTensor> {
    parse_idx(&std::fs::read(path)?)
}

pub fn write_idx(path: &Path, tensor: &IdxTensor) -> Result<()> {
    std::fs::write(path, tensor.to_bytes())?;
    Ok(())
}
