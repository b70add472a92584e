//! BDSP checkpoints: named little-endian tensors plus a JSON config snapshot.
//!
//! ```text
//! "BDSP" | version u32 | tensor count u32
//! per tensor: name_len u32 | name | ndim u32 | dims u32[ndim] | dtype u8 | values
//! json_len u32 | json
//! ```
//!
//! dtype 0 is f64, 1 is f32; values are row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BDSP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: serde_json::Value) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            config,
        }
    }

    /// Copies every tensor into the matching parameter of `store`; names and
    /// shapes must agree exactly.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            if store.find(name).is_none() {
                return Err(Error::Checkpoint(format!("model has no parameter {name}")));
            }
            store.assign(name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend(VERSION.to_le_bytes());
        b.extend(len_u32(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend(len_u32(name.len())?.to_le_bytes());
            b.extend(name.as_bytes());
            b.extend(len_u32(t.ndim())?.to_le_bytes());
            for &d in t.shape() {
                b.extend(len_u32(d)?.to_le_bytes());
            }
            b.push(DTYPE_F64);
            for v in t.data() {
                b.extend(v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.config)?;
        b.extend(len_u32(json.len())?.to_le_bytes());
        b.extend(json);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing BDSP magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match r.take(1)?[0] {
                DTYPE_F64 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DTYPE_F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => return Err(Error::Checkpoint(format!("{name}: unknown dtype {other}"))),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let json_len = r.u32()? as usize;
        let config = serde_json::from_slice(r.take(json_len)?)?;
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self { tensors, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.at))
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
