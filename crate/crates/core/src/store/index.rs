//! Index file layout, all integers little-endian:
//!
//! ```text
//! "VSEQ1"  u32 version=1  u32 dim  u64 record_count
//! per record: u32 id_len, id, u32 class_len, class (0 = unlabeled),
//!             u32 clip_count, clip_count * dim f32 values
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::dtw::EmbeddingSequence;
use crate::error::{Error, Result};
use crate::tensor::checkpoint::Cursor;

pub const MAGIC: &[u8; 5] = b"VSEQ1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 5 + 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub class_label: Option<String>,
    pub embeddings: EmbeddingSequence,
}

impl VideoRecord {
    pub fn video_id(&self) -> &str {
        self.embeddings.video_id()
    }
}

impl AsRef<EmbeddingSequence> for VideoRecord {
    fn as_ref(&self) -> &EmbeddingSequence {
        &self.embeddings
    }
}

/// Immutable set of records sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dim: usize,
    records: Vec<VideoRecord>,
}

impl Index {
    pub fn new(dim: usize, records: Vec<VideoRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("index dimension must be positive"));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if r.embeddings.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: r.embeddings.dim() });
            }
            if !seen.insert(r.video_id()) {
                return Err(Error::invalid(format!("duplicate video id `{}`", r.video_id())));
            }
        }
        Ok(Index { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id() == video_id)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.dim)?.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, r.video_id())?;
            put_str(&mut out, r.class_label.as_deref().unwrap_or(""))?;
            out.extend_from_slice(&u32_len(r.embeddings.len())?.to_le_bytes());
            for &v in r.embeddings.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
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
        let dim = cur.u32("dimension")? as usize;
        if dim == 0 {
            return Err(Error::Corrupt("index dimension is 0".into()));
        }
        let count = cur.u64("record count")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let id = cur.string("video id")?;
            let class = cur.string("class label")?;
            let clips = cur.u32("clip count")? as usize;
            if clips == 0 {
                return Err(Error::Corrupt(format!("video `{id}` has no clips")));
            }
            let n = clips.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or(Error::Truncated("embeddings"))?;
            let raw = cur.take(n, "embeddings")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let embeddings = EmbeddingSequence::from_flat(id, dim, data).map_err(|e| Error::Corrupt(e.to_string()))?;
            records.push(VideoRecord { class_label: (!class.is_empty()).then_some(class), embeddings });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Index::new(dim, records).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Corrupt(m),
            other => other,
        })
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} does not fit in u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.extend_from_slice(&u32_len(s.len())?.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn index_write(path: &Path, index: &Index) -> Result<()> {
    write_atomic(path, &index.to_bytes()?)
}

pub fn index_read(path: &Path) -> Result<Index> {
    Index::from_bytes(&fs::read(path)?)
}

/// One line of a `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub class: Option<String>,
    pub frame_count: usize,
    pub source: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
