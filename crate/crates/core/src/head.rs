//! Column-stacked classifier heads and their binary file format.
//!
//! Layout: `NPHEAD01`, `d: u32 LE`, `n: u32 LE`, role byte (0 = zero-shot,
//! 1 = centroid, 2 = ensemble), `n * d` f32 LE column-major, then `n` f32 LE
//! alpha values (zero for non-ensemble roles).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

pub const HEAD_MAGIC: &[u8; 8] = b"NPHEAD01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRole {
    ZeroShot = 0,
    Centroid = 1,
    Ensemble = 2,
}

impl HeadRole {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(HeadRole::ZeroShot),
            1 => Ok(HeadRole::Centroid),
            2 => Ok(HeadRole::Ensemble),
            other => Err(Error::MalformedHeader(format!("unknown head role {other}"))),
        }
    }
}

/// `d x n` matrix stored column-major: column `c` is the class-`c` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    dim: usize,
    n_classes: usize,
    data: Vec<f32>,
}

impl ClassifierHead {
    pub fn from_columns<C: AsRef<[f32]>>(dim: usize, columns: &[C]) -> Result<Self> {
        let mut data = Vec::with_capacity(dim * columns.len());
        for c in columns {
            let c = c.as_ref();
            if c.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.len(),
                });
            }
            data.extend_from_slice(c);
        }
        Ok(Self {
            dim,
            n_classes: columns.len(),
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn column(&self, c: usize) -> &[f32] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn columns(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// `head^T * query`, one score per class.
    pub fn logits(&self, query: &[f32]) -> Result<Vec<f32>> {
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "query has {} dims, head has {}",
                query.len(),
                self.dim
            )));
        }
        Ok(self.columns().map(|col| linalg::dot(col, query)).collect())
    }

    /// Argmax of the logits, ties to the lowest class index.
    pub fn predict(&self, query: &[f32]) -> Result<usize> {
        let logits = self.logits(query)?;
        linalg::argmax(&logits).ok_or_else(|| Error::ShapeMismatch("head has no classes".into()))
    }

    pub fn same_shape(&self, other: &ClassifierHead) -> Result<()> {
        if self.dim != other.dim || self.n_classes != other.n_classes {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.dim, self.n_classes, other.dim, other.n_classes
            )));
        }
        Ok(())
    }
}

/// A head as stored on disk: matrix, role and per-class alphas.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFile {
    pub role: HeadRole,
    pub head: ClassifierHead,
    pub alphas: Vec<f32>,
}

impl HeadFile {
    pub fn encode(&self) -> Vec<u8> {
        let h = &self.head;
        let mut out = Vec::with_capacity(17 + 4 * (h.data.len() + h.n_classes));
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&(h.dim as u32).to_le_bytes());
        out.extend_from_slice(&(h.n_classes as u32).to_le_bytes());
        out.push(self.role as u8);
        for v in &h.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in 0..h.n_classes {
            let a = self.alphas.get(c).copied().unwrap_or(0.0);
            out.extend_from_slice(&a.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 || &bytes[..8] != HEAD_MAGIC {
            return Err(Error::MalformedHeader("not a head file".into()));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let role = HeadRole::from_byte(bytes[16])?;
        let expected = 17 + 4 * (dim as u64 * n as u64 + n as u64);
        if bytes.len() as u64 != expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: bytes.len() as u64,
            });
        }
        let floats: Vec<f32> = bytes[17..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = floats.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: i / dim.max(1),
                col: i % dim.max(1),
            });
        }
        let (data, alphas) = floats.split_at(dim * n);
        Ok(Self {
            role,
            head: ClassifierHead {
                dim,
                n_classes: n,
                data: data.to_vec(),
            },
            alphas: alphas.to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
