//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"SETORCK1"
//! u64     tensor count
//! repeat:
//!   u64   name length, then UTF-8 name bytes
//!   u64   rank, then rank × u64 dims
//!   f64   prod(dims) values, row-major, raw IEEE-754 bits
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SETORCK1";

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = c.len()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let n = c.len()?;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = c.len()?;
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` too large")))?;
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

pub fn write_store(store: &ParamStore, path: &Path) -> Result<()> {
    let entries: Vec<_> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(&entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads every tensor of `store` from the checkpoint; names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .id(name)
            .map_err(|_| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}
