//! Binary store of precomputed prompt embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       6     magic "T3EMB\0"
//! 6       2     version (u16, currently 1)
//! 8       4     num_windows (u32)
//! 12      4     num_variables N (u32)
//! 16      4     d_LLM (u32)
//! 20      ...   f32 payload, row-major (window, variable, dim)
//! ```
//!
//! Windows are numbered in dataset enumeration order within one split:
//! stride-1 sliding windows starting at the first step of the split segment.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 6] = b"T3EMB\0";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbeddingStore {
    windows: usize,
    vars: usize,
    dim: usize,
    data: Vec<f32>,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
}

impl PromptEmbeddingStore {
    pub fn new(windows: usize, vars: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        for (name, v) in [("num_windows", windows), ("N", vars), ("d_LLM", dim)] {
            if v > u32::MAX as usize {
                return Err(Error::Config(format!("{name} = {v} does not fit in u32")));
            }
        }
        if data.len() != windows * vars * dim {
            return Err(Error::shape("embedding store", &[data.len()], &[windows, vars, dim]));
        }
        Ok(Self {
            windows,
            vars,
            dim,
            data,
        })
    }

    /// Store with one row per window, each `[N, d]`.
    pub fn from_windows(windows: &[Tensor<f64>]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::Data("no windows to store".into()));
        };
        let &[n, d] = first.shape() else {
            return Err(Error::shape("embedding store", first.shape(), &[]));
        };
        let mut data = Vec::with_capacity(windows.len() * n * d);
        for w in windows {
            if w.shape() != [n, d] {
                return Err(Error::shape("embedding store", w.shape(), &[n, d]));
            }
            data.extend(w.data().iter().map(|&v| v as f32));
        }
        Self::new(windows.len(), n, d, data)
    }

    pub fn num_windows(&self) -> usize {
        self.windows
    }

    pub fn num_vars(&self) -> usize {
        self.vars
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(format_err(bytes.len(), "file truncated inside magic"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(format_err(0, "bad magic, expected \"T3EMB\\0\""));
        }
        if bytes.len() < HEADER_LEN {
            return Err(format_err(bytes.len(), format!("header truncated, need {HEADER_LEN} bytes")));
        }
        let version = u16::from_le_bytes([bytes[6], bytes[7]]);
        if version != VERSION {
            return Err(format_err(6, format!("unsupported version {version}")));
        }
        let windows = read_u32(bytes, 8);
        let vars = read_u32(bytes, 12);
        let dim = read_u32(bytes, 16);
        if dim == 0 {
            return Err(format_err(16, "d_LLM is zero"));
        }
        let expected = windows
            .checked_mul(vars)
            .and_then(|v| v.checked_mul(dim))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| format_err(8, "header sizes overflow"))?;
        if bytes.len() < expected {
            return Err(format_err(
                bytes.len(),
                format!("payload truncated, header implies {expected} bytes"),
            ));
        }
        if bytes.len() > expected {
            return Err(format_err(
                expected,
                format!("{} trailing bytes after payload", bytes.len() - expected),
            ));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            windows,
            vars,
            dim,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.windows, self.vars, self.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// The `d_LLM` vector of one (window, variable) pair.
    pub fn lookup(&self, window: usize, var: usize) -> Result<&[f32]> {
        if window >= self.windows || var >= self.vars {
            return Err(Error::OutOfRange(format!(
                "({window}, {var}) outside store of {} windows x {} variables",
                self.windows, self.vars
            )));
        }
        let at = (window * self.vars + var) * self.dim;
        Ok(&self.data[at..at + self.dim])
    }

    /// Stacks the embeddings of `windows` into `[B, N, d_LLM]`.
    pub fn gather<T: Float>(&self, windows: &[usize]) -> Result<Tensor<T>> {
        let row = self.vars * self.dim;
        let mut out = Vec::with_capacity(windows.len() * row);
        for &w in windows {
            if w >= self.windows {
                return Err(Error::OutOfRange(format!(
                    "window {w} outside store of {} windows",
                    self.windows
                )));
            }
            out.extend(self.data[w * row..(w + 1) * row].iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(vec![windows.len(), self.vars, self.dim], out)
    }
}

/// Hex SHA-256 of a store file's bytes.
pub fn checksum_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn checksum_file(path: impl AsRef<Path>) -> Result<String> {
    Ok(checksum_bytes(&fs::read(path)?))
}
