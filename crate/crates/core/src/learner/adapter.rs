//! Low-rank adapter factors and their binary encoding.
//!
//! A file holds one layer: a 16-byte header (magic `SAGE`, then version,
//! rank and `d_in` as little-endian u32) followed by `A` (`r x d_in`) and
//! `B` (`d_out x r`) as little-endian row-major f32. `d_out` follows from
//! the file size.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, SageError};

pub const MAGIC: &[u8; 4] = b"SAGE";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Factors for one adapted weight `W (d_out x d_in)`; the effective weight
/// is `W + scaling * B A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapter {
    pub name: String,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub layers: Vec<LayerAdapter>,
    /// `alpha / r`.
    pub scaling: f64,
    /// Dropout applied to adapter inputs while training.
    pub dropout: f64,
}

impl LowRankAdapter {
    pub fn layer(&self, name: &str) -> Result<&LayerAdapter> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| SageError::InvalidInput(format!("adapter has no layer {name:?}")))
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, |l| l.rank)
    }

    /// `scaling * B A`, row-major `d_out x d_in`.
    pub fn delta(&self, name: &str) -> Result<Vec<f64>> {
        let l = self.layer(name)?;
        let mut out = vec![0.0; l.d_out * l.d_in];
        for i in 0..l.d_out {
            for k in 0..l.rank {
                let b = l.b[i * l.rank + k] as f64;
                if b == 0.0 {
                    continue;
                }
                for j in 0..l.d_in {
                    out[i * l.d_in + j] += self.scaling * b * l.a[k * l.d_in + j] as f64;
                }
            }
        }
        Ok(out)
    }
}

impl LayerAdapter {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.a.len() + self.b.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rank as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        for v in self.a.iter().chain(&self.b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(name: &str, bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(SageError::load(path, "header", "file shorter than the 16-byte header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(SageError::load(path, "magic", "expected SAGE"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let version = word(4);
        if version != FORMAT_VERSION as usize {
            return Err(SageError::load(path, "version", format!("unsupported version {version}")));
        }
        let (rank, d_in) = (word(8), word(12));
        if rank == 0 || d_in == 0 {
            return Err(SageError::load(path, "header", "rank and d_in must be positive"));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() % 4 != 0 {
            return Err(SageError::load(path, "body", "length is not a multiple of 4"));
        }
        let floats: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let a_len = rank * d_in;
        if floats.len() < a_len || (floats.len() - a_len) % rank != 0 {
            return Err(SageError::load(path, "body", "size does not match rank and d_in"));
        }
        let d_out = (floats.len() - a_len) / rank;
        Ok(LayerAdapter {
            name: name.to_owned(),
            rank,
            d_in,
            d_out,
            a: floats[..a_len].to_vec(),
            b: floats[a_len..].to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SageError::io(path, e))
    }

    pub fn read(name: &str, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SageError::io(path, e))?;
        Self::from_bytes(name, &bytes, path)
    }
}
