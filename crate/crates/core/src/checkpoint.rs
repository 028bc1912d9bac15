//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   "MLCNNCKP"
//! version  u32 LE
//! count    u32 LE    number of records
//! record*  sorted by name:
//!   name_len u32 LE, name (UTF-8)
//!   ndim     u32 LE, dims (u64 LE each)
//!   data     f64 LE, row-major
//! ```
//!
//! Values are stored as their raw bit patterns, so a round trip is bit exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MLCNNCKP";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParameterStore) -> Result<Vec<u8>> {
    if !store.is_finite() {
        return Err(Error::Checkpoint("refusing to save non-finite parameters".into()));
    }
    let mut buf = Vec::with_capacity(16 + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!("`{name}`: bad rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= buf.len() / 8)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: bad shape {shape:?}")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        store
            .insert(name.clone(), t)
            .map_err(|_| Error::Checkpoint(format!("duplicate record `{name}`")))?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last record",
            buf.len() - r.pos
        )));
    }
    Ok(store)
}

/// Writes `store` to `path` atomically (temporary file, then rename).
pub fn save_params(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(store)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
