//! `PGT1` tensor files: magic, `u32` rank, `rank × u64` dims, then
//! row-major `f32` values, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{IoError, Result};

pub const MAGIC: [u8; 4] = *b"PGT1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(IoError::format("tensor", format!("dims {dims:?} hold {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Rounds `values` to 32-bit floats.
    pub fn from_f64(dims: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(dims, values.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Rows of the tensor viewed as `dims[0] × rest`.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        let n = self.dims.first().copied().unwrap_or(1).max(1);
        let width = self.data.len() / n;
        if width == 0 {
            return vec![Vec::new(); n];
        }
        self.data.chunks(width).map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected: usize| IoError::Truncated { expected: expected as u64, found: bytes.len() as u64 };
        if bytes.len() < 8 {
            return Err(truncated(8));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(IoError::BadMagic { found: magic, expected: MAGIC });
        }
        let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header = 8 + 8 * rank;
        if bytes.len() < header {
            return Err(truncated(header));
        }
        let dims: Vec<usize> = bytes[8..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| IoError::format("tensor", format!("dims {dims:?} overflow")))?;
        let expected = count.checked_mul(4).and_then(|b| b.checked_add(header)).ok_or_else(|| IoError::format("tensor", "size overflow"))?;
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(IoError::format("tensor", format!("{} trailing bytes", bytes.len() - expected)));
        }
        let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { dims, data })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(IoError::io(path))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), &self.to_bytes())
    }
}
