//! "UNCK" checkpoint files.
//!
//! Little-endian layout: magic `b"UNCK"`, u16 version (= 1), u32 length plus
//! the model config as `key=value` text, u32 parameter count, then per
//! parameter a u32 name length, the UTF-8 name, u32 axis count, u32 extents
//! and f32 values, and finally a u64 count of training steps.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{ModelConfig, UNet3d};
use crate::autotensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UNCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<StoredParam>,
    pub steps: u64,
}

impl Checkpoint {
    pub fn from_model(model: &UNet3d, steps: u64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model
                .params
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|&v| v as f32).collect(),
                })
                .collect(),
            steps,
        }
    }

    /// Rebuilds the network and loads the stored values, checking names and shapes against a fresh build.
    pub fn to_model(&self) -> Result<UNet3d> {
        let mut model = UNet3d::build(&self.config)?;
        let mut names = BTreeSet::new();
        if self.params.len() != model.params.len() {
            return Err(Error::Format(format!("checkpoint holds {} parameters, model has {}", self.params.len(), model.params.len())));
        }
        for (stored, p) in self.params.iter().zip(model.params.iter_mut()) {
            if !names.insert(stored.name.as_str()) {
                return Err(Error::Format(format!("duplicate parameter {}", stored.name)));
            }
            if stored.name != p.name || stored.shape != p.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    stored.name,
                    stored.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = Tensor::from_vec(&stored.shape, stored.values.iter().map(|&v| v as Real).collect())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.steps.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a UNCK checkpoint".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|e| Error::Format(format!("config block is not UTF-8: {e}")))?;
        let config = ModelConfig::from_text(text)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| Error::Format(format!("parameter name is not UTF-8: {e}")))?;
            let axes = r.u32()? as usize;
            if axes > 5 {
                return Err(Error::Format(format!("{name}: {axes} axes")));
            }
            let shape = (0..axes).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.push(StoredParam { name, shape, values });
        }
        let steps = u64::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, params, steps })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
