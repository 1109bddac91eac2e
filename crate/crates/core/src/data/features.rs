//! IMGF image-feature files: `"IMGF"`, u32 version (1), u32 n, u32 d, then
//! `n * d` little-endian f32 values, row-major. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMGF_MAGIC: &[u8; 4] = b"IMGF";
pub const IMGF_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// `n` pooled image vectors of a common dimension, aligned with corpus lines.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    values: Vec<f32>,
}

impl FeatureStore {
    pub fn new(dim: usize, rows: Vec<Vec<f32>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InvalidArgument(format!("feature row {i} has length {}, expected {dim}", r.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature row {i}")));
            }
            values.extend_from_slice(r);
        }
        Ok(FeatureStore { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Row `i` widened to `f64`.
    pub fn feature(&self, i: usize) -> Vec<f64> {
        self.get(i).iter().map(|&v| v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(IMGF_MAGIC);
        out.extend_from_slice(&IMGF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != IMGF_MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "IMGF" });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated { path: path.into() });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != IMGF_VERSION {
            return Err(Error::BadVersion { path: path.into(), version });
        }
        let (n, d) = (word(8) as usize, word(12) as usize);
        if d == 0 {
            return Err(Error::Format { path: path.into(), message: "zero feature dimension".into() });
        }
        let expected = n.checked_mul(d).and_then(|c| c.checked_mul(4)).ok_or(Error::Truncated { path: path.into() })?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < expected {
            return Err(Error::Truncated { path: path.into() });
        }
        if payload.len() > expected {
            return Err(Error::Format { path: path.into(), message: "trailing bytes after payload".into() });
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{}: feature row {}", path.display(), i / d)));
        }
        Ok(FeatureStore { dim: d, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_image_features(path: &Path) -> Result<FeatureStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureStore::from_bytes(&bytes, path)
}
