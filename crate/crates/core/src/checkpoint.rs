//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DMSH"            magic
//! u32               format version
//! u32               entry count
//! per entry:
//!   u32             name length in bytes
//!   [u8]            UTF-8 name
//!   u8              frozen flag (1 = parameter of a frozen network)
//!   u32             rank
//!   u32 * rank      extents
//!   f64 * product   raw values
//! ```
//!
//! Optimizer state is never stored.

use std::fs;
use std::path::Path;

use crate::error::{DemeshError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMSH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub frozen: bool,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, frozen: bool, tensor: Tensor) {
        self.entries.push(CheckpointEntry {
            name: name.into(),
            frozen,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str, path: &Path) -> Result<&Tensor> {
        self.get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| DemeshError::format(path, format!("missing entry `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(u8::from(e.frozen));
            out.extend_from_slice(&(e.tensor.ndim() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(DemeshError::format(path, "bad magic, not a DMSH checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DemeshError::format(path, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| DemeshError::format(path, "entry name is not UTF-8"))?
                .to_string();
            let frozen = match r.take(1)?[0] {
                0 => false,
                1 => true,
                other => return Err(DemeshError::format(path, format!("bad frozen flag {other}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| DemeshError::format(path, e.to_string()))?;
            entries.push(CheckpointEntry { name, frozen, tensor });
        }
        if r.pos != bytes.len() {
            return Err(DemeshError::format(path, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| DemeshError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DemeshError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(DemeshError::format(self.path, "truncated checkpoint"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
