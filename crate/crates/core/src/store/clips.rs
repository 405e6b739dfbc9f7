use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::model::ClipTensor;
use crate::tensor::Tensor;

/// Cuts a `(M, spatial..., C)` video into clips of `k` frames starting every
/// `stride` frames. Frames past the last full clip are dropped.
pub fn split_clips(frames: &Tensor, k: usize, stride: usize) -> Result<Vec<ClipTensor>> {
    if k == 0 || stride == 0 {
        return Err(Error::invalid("clip length and stride must be positive"));
    }
    if frames.rank() < 3 {
        return Err(Error::shape("split_clips", format!("need (M, spatial..., C), got {:?}", frames.shape())));
    }
    let m = frames.shape()[0];
    if m < k {
        return Err(Error::invalid(format!("video has {m} frames, fewer than the clip length {k}")));
    }
    let step: usize = frames.shape()[1..].iter().product();
    let mut shape = frames.shape().to_vec();
    shape[0] = k;
    (0..=m - k)
        .step_by(stride)
        .map(|start| {
            let data = frames.data()[start * step..(start + k) * step].to_vec();
            ClipTensor::new(Tensor::new(shape.clone(), data)?)
        })
        .collect()
}

/// Decoded frames with their capture rate. Each frame is `(H, W, C)`.
#[derive(Debug, Clone)]
pub struct RawVideo {
    pub frames: Vec<Tensor>,
    pub fps: f64,
}

/// Source frame shown at each tick of the target rate (nearest frame).
pub fn resample_indices(count: usize, source_fps: f64, target_fps: f64) -> Result<Vec<usize>> {
    if !(source_fps > 0.0 && target_fps > 0.0) {
        return Err(Error::invalid("frame rates must be positive"));
    }
    let ratio = source_fps / target_fps;
    let out = ((count as f64 / ratio) - 1e-9).ceil().max(0.0) as usize;
    Ok((0..out).map(|k| ((k as f64 * ratio).round() as usize).min(count - 1)).collect())
}

fn resize_frame(frame: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if (h, w) == (height, width) {
        return Ok(frame.clone());
    }
    let mut out = vec![0.0; height * width * c];
    for ch in 0..c {
        let plane: Vec<f32> = frame.data().iter().skip(ch).step_by(c).map(|&v| v as f32).collect();
        let img: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, plane).expect("plane length matches");
        let resized = imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
        for (i, p) in resized.pixels().enumerate() {
            out[i * c + ch] = p.0[0] as f64;
        }
    }
    Tensor::new(vec![height, width, c], out)
}

fn center_crop(frame: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w, c) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if h < size || w < size {
        return Err(Error::invalid(format!("frame {h}x{w} is smaller than the {size}x{size} crop")));
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let mut out = Vec::with_capacity(size * size * c);
    for y in top..top + size {
        let row = (y * w + left) * c;
        out.extend_from_slice(&frame.data()[row..row + size * c]);
    }
    Tensor::new(vec![size, size, c], out)
}

/// Resamples to `target_fps`, resizes so the height is `size` keeping the
/// aspect ratio, and crops the central `size x size` square. Returns the
/// `(M, size, size, C)` video, not yet standardized.
pub fn preprocess(raw: &RawVideo, target_fps: f64, size: usize) -> Result<Tensor> {
    let first = raw.frames.first().ok_or(Error::Empty("video frames"))?;
    if first.rank() != 3 {
        return Err(Error::shape("preprocess", format!("frames must be (H, W, C), got {:?}", first.shape())));
    }
    let mut out = Vec::new();
    for i in resample_indices(raw.frames.len(), raw.fps, target_fps)? {
        let f = &raw.frames[i];
        if f.shape() != first.shape() {
            return Err(Error::shape("preprocess", format!("frame {i} is {:?}, first is {:?}", f.shape(), first.shape())));
        }
        let (h, w) = (f.shape()[0], f.shape()[1]);
        let width = ((w as f64 * size as f64 / h as f64).round() as usize).max(1);
        out.push(center_crop(&resize_frame(f, size, width)?, size)?);
    }
    Tensor::stack(&out)
}

/// Per-channel mean and standard deviation over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(channels: usize) -> Self {
        Standardizer { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn fit<'a>(videos: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let videos: Vec<&Tensor> = videos.into_iter().collect();
        for v in &videos {
            let c = v.channels();
            if sum.is_empty() {
                sum = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::DimensionMismatch { expected: sum.len(), found: c });
            }
            for row in v.data().chunks(c) {
                sum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
            count += v.len() / c;
        }
        if count == 0 {
            return Err(Error::Empty("standardization data"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for v in &videos {
            for row in v.data().chunks(mean.len()) {
                for (ch, x) in row.iter().enumerate() {
                    var[ch] += (x - mean[ch]).powi(2);
                }
            }
        }
        let std = var.iter().map(|v| (v / count as f64).sqrt().max(1e-8)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, video: &Tensor) -> Result<Tensor> {
        let c = video.channels();
        if c != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), found: c });
        }
        let data = video.data().chunks(c).flat_map(|row| row.iter().enumerate().map(|(ch, x)| (x - self.mean[ch]) / self.std[ch])).collect();
        Tensor::new(video.shape().to_vec(), data)
    }

    /// `mean` and `std` as comma-separated lists.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        vec![("standardize.mean".into(), join(&self.mean)), ("standardize.std".into(), join(&self.std))]
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<Vec<f64>> {
            let (_, v) = meta
                .iter()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{key}`")))?;
            v.split(',').map(|x| x.trim().parse().map_err(|_| Error::Corrupt(format!("bad number in `{key}`")))).collect()
        };
        let (mean, std) = (get("standardize.mean")?, get("standardize.std")?);
        if mean.len() != std.len() {
            return Err(Error::Corrupt("standardization lists differ in length".into()));
        }
        Ok(Standardizer { mean, std })
    }
}
