//! Binary checkpoints: config text followed by every registered tensor.
//!
//! Layout (little-endian):
//! `"T3CKPT"`, u16 version, u32 text length, UTF-8 `key=value` text, u32
//! tensor count, then per tensor: u32 name length, name, u32 ndim, ndim×u32
//! dims, f32 payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config::{parse_kv, ModelConfig};
use crate::data::{NormStats, Normalization};
use crate::error::{Error, Result};
use crate::model::T3Time;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"T3CKPT";
pub const VERSION: u16 = 1;
const META_PREFIX: &str = "meta.";

/// A trained model plus free-form run metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: T3Time<f32>,
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated at byte {} reading {what}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn new(model: T3Time<f32>) -> Self {
        Self {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = self.model.config().to_kv();
        for (k, v) in &self.meta {
            text.push_str(&format!("{META_PREFIX}{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let entries = self.model.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint and checks every tensor against the registry of a
    /// freshly built model with the stored config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(bad("not a checkpoint: bad magic"));
        }
        let version = u16::from_le_bytes(c.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let text_len = c.u32("config length")?;
        let text = std::str::from_utf8(c.take(text_len, "config")?).map_err(|_| bad("config text is not UTF-8"))?;
        let cfg = ModelConfig::from_kv(text).map_err(|e| bad(format!("stored config: {e}")))?;
        let meta = parse_kv(text)?
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(META_PREFIX).map(|k| (k.to_string(), v)))
            .collect();
        let mut model = T3Time::<f32>::new(&cfg)?;
        let count = c.u32("tensor count")?;
        if count != model.params.len() {
            return Err(bad(format!(
                "checkpoint holds {count} tensors, config builds {}",
                model.params.len()
            )));
        }
        for entry in model.params.entries_mut() {
            let name_len = c.u32("name length")?;
            let name = std::str::from_utf8(c.take(name_len, "name")?).map_err(|_| bad("tensor name is not UTF-8"))?;
            if name != entry.name {
                return Err(bad(format!("expected tensor {}, found {name}", entry.name)));
            }
            let ndim = c.u32("rank")?;
            let shape = (0..ndim).map(|_| c.u32("dims")).collect::<Result<Vec<_>>>()?;
            if shape != entry.value.shape() {
                return Err(bad(format!(
                    "tensor {name} has shape {shape:?}, config expects {:?}",
                    entry.value.shape()
                )));
            }
            let payload = c.take(entry.value.numel() * 4, name)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            entry.value = Tensor::new(shape, data)?;
        }
        if c.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn set_normalization(&mut self, norm: &Normalization) {
        self.meta.insert("norm".into(), norm.name().into());
        if let Normalization::Global(s) = norm {
            self.meta.insert("norm.mean".into(), join(&s.mean));
            self.meta.insert("norm.std".into(), join(&s.std));
        }
    }

    /// Normalization recorded at training time; instance when absent.
    pub fn normalization(&self) -> Result<Normalization> {
        match self.meta.get("norm").map(String::as_str) {
            None | Some("instance") => Ok(Normalization::Instance),
            Some("global") => {
                let field = |k: &str| -> Result<Vec<f64>> {
                    let v = self.meta.get(k).ok_or_else(|| bad(format!("missing {k}")))?;
                    v.split(',')
                        .map(|x| x.parse().map_err(|_| bad(format!("bad number '{x}' in {k}"))))
                        .collect()
                };
                Ok(Normalization::Global(NormStats {
                    mean: field("norm.mean")?,
                    std: field("norm.std")?,
                }))
            }
            Some(other) => Err(bad(format!("unknown normalization '{other}'"))),
        }
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}
