//! Clip splitting, preprocessing, embedding and the on-disk index.

pub mod clips;
pub mod frames;
pub mod index;

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

pub use clips::{preprocess, resample_indices, split_clips, RawVideo, Standardizer};
pub use frames::{read_frames, write_frames};
pub use index::{index_read, index_write, read_manifest, write_manifest, Index, ManifestEntry, VideoRecord};

use crate::dtw::EmbeddingSequence;
use crate::error::Result;
use crate::model::{Autoencoder, ClipTensor, EmbeddingVector};
use crate::tensor::Tensor;

/// Encodes clips in parallel; the output keeps input order.
pub fn embed_clips(model: &Autoencoder, clips: &[ClipTensor]) -> Result<Vec<EmbeddingVector>> {
    clips.par_iter().map(|c| model.encode(c)).collect()
}

/// Splits a preprocessed `(M, spatial..., C)` video into clips and encodes
/// each one.
pub fn embed_video(
    video_id: &str,
    frames: &Tensor,
    model: &Autoencoder,
    clip_len: usize,
    stride: usize,
) -> Result<EmbeddingSequence> {
    let clips = split_clips(frames, clip_len, stride)?;
    EmbeddingSequence::new(video_id, &embed_clips(model, &clips)?)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
