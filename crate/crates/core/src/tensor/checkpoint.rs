//! Checkpoint file layout, all integers little-endian:
//!
//! ```text
//! "VCKPT1"  u32 version=1
//! u32 header_len, header_len bytes of UTF-8 `key=value` text
//! u32 param_count
//! per param: u32 name_len, name, u32 rank, rank x u32 dims, f32 values
//! ```

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"VCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(header: impl Into<String>, store: &ParamStore) -> Self {
        let params = store.iter().map(|p| (p.name().to_string(), p.value().clone())).collect();
        Checkpoint { header: header.into(), params }
    }

    /// Copies every stored tensor into the parameter of the same name.
    /// The names and shapes must match `store` exactly.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint parameter `{name}` not in model")))?;
            store.set_value(id, value.clone())?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.header)?;
        w.write_all(&len_u32(self.params.len())?.to_le_bytes())?;
        for (name, t) in &self.params {
            write_str(w, name)?;
            w.write_all(&len_u32(t.rank())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&len_u32(d)?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header = cur.string("header")?;
        let count = cur.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = cur.string("parameter name")?;
            let rank = cur.u32("parameter rank")? as usize;
            if rank == 0 {
                return Err(Error::Corrupt(format!("parameter `{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(cur.u32("parameter dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corrupt(format!("parameter `{name}` size overflows")))?;
            let raw = cur.take(n.checked_mul(4).ok_or(Error::Truncated("parameter values"))?, "parameter values")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("parameter `{name}`: {e}")))?;
            params.push((name, t));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Checkpoint { header, params })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} does not fit in u32")))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&len_u32(s.len())?.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }
}
