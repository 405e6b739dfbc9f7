//! Deterministic synthetic videos: one moving shape per video on a flat
//! background, with a class for every (shape, motion) pair.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::{write_frames, write_manifest, ManifestEntry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Motion {
    Left,
    Right,
    /// Up and down between the frame edges.
    Bounce,
    /// Circular orbit around the frame center.
    Rotate,
}

macro_rules! names {
    ($ty:ident, $what:literal, $($var:ident => $s:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$var => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$var),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
    };
}

names!(Shape, "shape", Square => "square", Circle => "circle", Triangle => "triangle");
names!(Motion, "motion", Left => "left", Right => "right", Bounce => "bounce", Rotate => "rotate");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassSpec {
    pub shape: Shape,
    pub motion: Motion,
}

impl ClassSpec {
    pub fn new(shape: Shape, motion: Motion) -> Self {
        ClassSpec { shape, motion }
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.shape, self.motion)
    }
}

impl FromStr for ClassSpec {
    type Err = Error;
    /// `square-left`, `circle:bounce`, ...
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(['-', ':'])
            .ok_or_else(|| Error::Config(format!("class `{s}` is not shape-motion")))?;
        Ok(ClassSpec { shape: a.trim().parse()?, motion: b.trim().parse()? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    pub videos_per_class: usize,
    pub frames: usize,
    pub size: usize,
    /// 3 for RGB, 4 adds a depth channel.
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Pixels per frame for left/right, and the step size of the others.
    pub velocity: usize,
    /// Side of the shape's bounding box in pixels.
    pub object_size: usize,
    /// When set, all videos of a class start from one class-wide position
    /// and phase, moved by at most this many pixels or steps. Otherwise
    /// every video starts anywhere.
    pub shared_trajectory: Option<usize>,
    /// Share of videos stored played backward. They keep their class.
    pub reversed_fraction: f64,
    /// Scales the per-video spread of object and background colors around
    /// their midpoints; 0 gives every video the same colors.
    pub color_jitter: f64,
}

impl SynthSpec {
    /// 3 classes x 20 videos x 32 frames of 16x16 RGB.
    pub fn default_set(seed: u64) -> Self {
        SynthSpec {
            classes: vec![
                ClassSpec::new(Shape::Square, Motion::Left),
                ClassSpec::new(Shape::Circle, Motion::Bounce),
                ClassSpec::new(Shape::Triangle, Motion::Rotate),
            ],
            videos_per_class: 20,
            frames: 32,
            size: 16,
            channels: 3,
            noise_std: 0.05,
            seed,
            velocity: 1,
            object_size: 6,
            shared_trajectory: None,
            reversed_fraction: 0.0,
            color_jitter: 1.0,
        }
    }

    /// The default set with class-wide trajectories and half of the videos
    /// played backward, so that same-class videos can disagree in direction.
    pub fn reversal_set(seed: u64) -> Self {
        SynthSpec { shared_trajectory: Some(0), reversed_fraction: 0.5, ..Self::default_set(seed) }
    }

    pub fn validate(&self, clip_len: usize) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("frame size {} is below 8", self.size)));
        }
        if self.frames < clip_len.max(1) {
            return Err(Error::Config(format!("{} frames is fewer than the clip length {clip_len}", self.frames)));
        }
        if self.object_size == 0 || self.object_size > self.size {
            return Err(Error::Config(format!("shape of {} px does not fit a {} px frame", self.object_size, self.size)));
        }
        if !matches!(self.channels, 3 | 4) {
            return Err(Error::Config(format!("channels must be 3 or 4, got {}", self.channels)));
        }
        if self.classes.is_empty() || self.videos_per_class == 0 {
            return Err(Error::Config("need at least one class and one video per class".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.classes.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::Config(format!("class {} listed twice", dup.name())));
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return Err(Error::Config(format!("color_jitter {} must be in [0, 1]", self.color_jitter)));
        }
        if !(0.0..=1.0).contains(&self.reversed_fraction) {
            return Err(Error::Config(format!("reversed_fraction {} must be in [0, 1]", self.reversed_fraction)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// Everything that fixes one video's pixels apart from noise.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoParams {
    pub class: ClassSpec,
    pub frames: usize,
    pub size: usize,
    pub channels: usize,
    pub velocity: usize,
    pub object_size: usize,
    /// Top-left corner of the shape at frame 0.
    pub x0: usize,
    pub y0: usize,
    /// Orbit start angle in steps of `velocity / size` turns.
    pub phase: usize,
    pub foreground: [f64; 3],
    pub background: [f64; 3],
    /// Object depth at the first and last frame, background sits at 1.
    pub depth: (f64, f64),
}

impl VideoParams {
    /// Top-left corner of the shape at frame `t`, before wrapping.
    pub fn position(&self, t: usize) -> (i64, i64) {
        let (s, v, t) = (self.size as i64, self.velocity as i64, t as i64);
        let (x0, y0) = (self.x0 as i64, self.y0 as i64);
        match self.class.motion {
            Motion::Left => (x0 - v * t, y0),
            Motion::Right => (x0 + v * t, y0),
            Motion::Bounce => {
                let span = (s - self.object_size as i64).max(1);
                let u = (y0 + v * t).rem_euclid(2 * span);
                (x0, if u <= span { u } else { 2 * span - u })
            }
            Motion::Rotate => {
                let radius = s as f64 / 4.0;
                let angle = 2.0 * PI * (self.phase as i64 + v * t) as f64 / s as f64;
                let c = (s - self.object_size as i64) as f64 / 2.0;
                ((c + radius * angle.cos()).round() as i64, (c + radius * angle.sin()).round() as i64)
            }
        }
    }

    /// Noise-free `(M, size, size, channels)` video.
    pub fn render(&self) -> Tensor {
        let (s, c, m) = (self.size, self.channels, self.frames);
        let mask = shape_mask(self.class.shape, self.object_size);
        let mut data = Vec::with_capacity(m * s * s * c);
        for t in 0..m {
            let mut frame = vec![false; s * s];
            let (px, py) = self.position(t);
            for (i, &on) in mask.iter().enumerate() {
                if on {
                    let (dy, dx) = ((i / self.object_size) as i64, (i % self.object_size) as i64);
                    let (x, y) = ((px + dx).rem_euclid(s as i64) as usize, (py + dy).rem_euclid(s as i64) as usize);
                    frame[y * s + x] = true;
                }
            }
            let ramp = if m > 1 { t as f64 / (m - 1) as f64 } else { 0.0 };
            let depth = self.depth.0 + (self.depth.1 - self.depth.0) * ramp;
            for &on in &frame {
                let rgb = if on { self.foreground } else { self.background };
                data.extend_from_slice(&rgb);
                if c == 4 {
                    data.push(if on { depth } else { 1.0 });
                }
            }
        }
        Tensor::new(vec![m, s, s, c], data).expect("sized buffer")
    }
}

fn shape_mask(shape: Shape, n: usize) -> Vec<bool> {
    let mid = (n as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - mid, y as f64 - mid);
            out.push(match shape {
                Shape::Square => true,
                Shape::Circle => dx * dx + dy * dy <= (n as f64 / 2.0).powi(2),
                // Apex at the top row, base along the bottom.
                Shape::Triangle => dx.abs() <= (y as f64 + 0.5) / 2.0,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub video_id: String,
    pub class_index: usize,
    pub params: VideoParams,
    /// Stored played backward.
    pub reversed: bool,
    /// `(M, size, size, channels)`.
    pub frames: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub class_names: Vec<String>,
    pub videos: Vec<SynthVideo>,
}

impl SynthDataset {
    pub fn class_name(&self, video: &SynthVideo) -> &str {
        &self.class_names[video.class_index]
    }
}

fn sample_params(spec: &SynthSpec, class_index: usize, rng: &mut ChaCha8Rng) -> VideoParams {
    let s = spec.size;
    let class = spec.classes[class_index];
    let (mut x0, mut y0, mut phase) = (rng.gen_range(0..s), rng.gen_range(0..s), rng.gen_range(0..s));
    if let Some(jitter) = spec.shared_trajectory {
        let mut class_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        class_rng.set_stream(u64::MAX - class_index as u64);
        let j = jitter as i64;
        let near = |base: usize, rng: &mut ChaCha8Rng| (base as i64 + rng.gen_range(-j..=j)).rem_euclid(s as i64) as usize;
        x0 = near(class_rng.gen_range(0..s), rng);
        y0 = near(class_rng.gen_range(0..s), rng);
        phase = near(class_rng.gen_range(0..s), rng);
    }
    let jitter = spec.color_jitter;
    let mut color = |lo: f64, hi: f64| -> [f64; 3] {
        let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
        std::array::from_fn(|_| mid + jitter * half * rng.gen_range(-1.0..1.0))
    };
    let foreground = color(0.55, 1.0);
    let background = color(0.0, 0.35);
    let near = rng.gen_range(0.1..0.4);
    let far = rng.gen_range(0.6..0.9);
    VideoParams {
        class,
        frames: spec.frames,
        size: s,
        channels: spec.channels,
        velocity: spec.velocity,
        object_size: spec.object_size,
        x0,
        y0,
        phase,
        foreground,
        background,
        depth: if rng.gen_bool(0.5) { (near, far) } else { (far, near) },
    }
}

/// Renders every video of `spec`. Each video draws from its own random
/// stream, so the output does not depend on thread scheduling.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate(1)?;
    let jobs: Vec<(usize, usize)> =
        (0..spec.classes.len()).flat_map(|c| (0..spec.videos_per_class).map(move |v| (c, v))).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let videos = jobs
        .par_iter()
        .enumerate()
        .map(|(n, &(c, v))| {
            let class = spec.classes[c];
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(n as u64);
            let params = sample_params(spec, c, &mut rng);
            let reversed = rng.gen_bool(spec.reversed_fraction);
            let mut frames = params.render();
            if reversed {
                let mut f = frames.unstack();
                f.reverse();
                frames = Tensor::stack(&f).expect("same-shape frames");
            }
            if spec.noise_std > 0.0 {
                frames.data_mut().iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            }
            SynthVideo { video_id: format!("{}_{v:03}", class.name()), class_index: c, params, reversed, frames }
        })
        .collect();
    Ok(SynthDataset { class_names: spec.classes.iter().map(ClassSpec::name).collect(), videos })
}

/// Writes `videos/<id>/frame_*.png` under `dir` plus `manifest.jsonl`.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = data
        .videos
        .par_iter()
        .map(|v| {
            let rel = format!("videos/{}", v.video_id);
            let clamped = Tensor::new(v.frames.shape().to_vec(), v.frames.data().iter().map(|x| x.clamp(0.0, 1.0)).collect())?;
            write_frames(&dir.join(&rel), &clamped)?;
            Ok(ManifestEntry {
                video_id: v.video_id.clone(),
                class: Some(data.class_name(v).to_string()),
                frame_count: v.frames.shape()[0],
                source: rel,
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}
