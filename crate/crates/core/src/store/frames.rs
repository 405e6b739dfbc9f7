//! Image-sequence directories: one PNG per frame, named so that sorting the
//! file names gives frame order. RGB frames are 8-bit RGB; frames with a
//! depth channel are 8-bit RGBA with depth in the alpha channel.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage, RgbaImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every frame as an `(H, W, C)` tensor with values in `[0, 1]`;
/// `channels` is 3 or 4.
pub fn read_frames(dir: &Path, channels: usize) -> Result<Vec<Tensor>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no PNG frames in {}", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let img = image::open(f)?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let raw = match channels {
                3 => img.into_rgb8().into_raw(),
                4 => img.into_rgba8().into_raw(),
                c => return Err(Error::invalid(format!("unsupported channel count {c}"))),
            };
            Tensor::new(vec![h, w, channels], raw.into_iter().map(|v| v as f64 / 255.0).collect())
        })
        .collect()
}

/// Writes `(M, H, W, C)` values in `[0, 1]` as `frame_00000.png`, ...
pub fn write_frames(dir: &Path, video: &Tensor) -> Result<()> {
    let s = video.shape();
    if s.len() != 4 || !(s[3] == 3 || s[3] == 4) {
        return Err(Error::shape("write_frames", format!("need (M, H, W, 3|4), got {s:?}")));
    }
    fs::create_dir_all(dir)?;
    let (h, w, c) = (s[1], s[2], s[3]);
    for (i, frame) in video.unstack().iter().enumerate() {
        let bytes: Vec<u8> = frame.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = if c == 3 {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer"))
        } else {
            DynamicImage::ImageRgba8(RgbaImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer"))
        };
        img.save(dir.join(format!("frame_{i:05}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_on_the_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        for c in [3, 4] {
            let n = 2 * 3 * 2 * c;
            let video = Tensor::new(vec![2, 3, 2, c], (0..n).map(|i| (i * 7 % 256) as f64 / 255.0).collect()).unwrap();
            let sub = dir.path().join(format!("c{c}"));
            write_frames(&sub, &video).unwrap();
            let back = Tensor::stack(&read_frames(&sub, c).unwrap()).unwrap();
            assert_eq!(back, video);
        }
    }
}
