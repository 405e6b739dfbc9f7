//! Glue between datasets on disk, the model and the index.

use std::path::Path;

use rayon::prelude::*;

use serde::Serialize;

use crate::dtw::{BidtwMode, DtwConfig, EmbeddingSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, generate_test_queries, CropSpec, Protocol, QueryCase, SourceVideo};
use crate::model::{Autoencoder, ClipTensor, ModelConfig};
use crate::store::{
    embed_clips, preprocess, read_frames, read_manifest, split_clips, Index, RawVideo, Standardizer, VideoRecord,
};
use crate::synth::SynthDataset;
use crate::tensor::Tensor;
use crate::train::{train_schedule, LabeledClips, Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetVideo {
    pub video_id: String,
    pub class: Option<String>,
    /// `(M, H, W, C)`, not standardized.
    pub frames: Tensor,
}

impl DatasetVideo {
    pub fn from_synth(data: &SynthDataset) -> Vec<DatasetVideo> {
        data.videos
            .iter()
            .map(|v| DatasetVideo {
                video_id: v.video_id.clone(),
                class: Some(data.class_name(v).to_string()),
                frames: v.frames.clone(),
            })
            .collect()
    }
}

/// Reads every video listed in `dir/manifest.jsonl`. Frames that are not
/// `size x size` are resized and center-cropped.
pub fn load_dataset(dir: &Path, channels: usize, size: usize) -> Result<Vec<DatasetVideo>> {
    let manifest = read_manifest(&dir.join("manifest.jsonl"))?;
    if manifest.is_empty() {
        return Err(Error::Empty("dataset manifest"));
    }
    manifest
        .par_iter()
        .map(|entry| {
            let frames = load_video(&dir.join(&entry.source), channels, size)?;
            if frames.shape()[0] != entry.frame_count {
                log::warn!("{}: manifest lists {} frames, found {}", entry.video_id, entry.frame_count, frames.shape()[0]);
            }
            Ok(DatasetVideo { video_id: entry.video_id.clone(), class: entry.class.clone(), frames })
        })
        .collect()
}

/// One directory of PNG frames as an `(M, size, size, channels)` tensor.
pub fn load_video(dir: &Path, channels: usize, size: usize) -> Result<Tensor> {
    let frames = read_frames(dir, channels)?;
    if frames[0].shape()[..2] == [size, size] {
        Tensor::stack(&frames)
    } else {
        // Same rate in and out: only resizing and cropping happen.
        preprocess(&RawVideo { frames, fps: 1.0 }, 1.0, size)
    }
}

pub fn fit_standardizer(videos: &[DatasetVideo]) -> Result<Standardizer> {
    Standardizer::fit(videos.iter().map(|v| &v.frames))
}

/// Standardized clips of every video: all of them, and the labeled ones
/// with their classes.
pub fn training_clips(
    videos: &[DatasetVideo],
    standardizer: &Standardizer,
    clip_len: usize,
    stride: usize,
) -> Result<(Vec<ClipTensor>, LabeledClips)> {
    let mut unlabeled = Vec::new();
    let mut labeled = LabeledClips::default();
    for v in videos {
        let clips = split_clips(&standardizer.apply(&v.frames)?, clip_len, stride)?;
        match &v.class {
            Some(c) => clips.into_iter().for_each(|clip| labeled.push(clip, c)),
            None => unlabeled.extend(clips),
        }
    }
    Ok((unlabeled, labeled))
}

/// Standardizes, splits and encodes one video. Values are rounded to f32
/// so queries see exactly what the index stores.
pub fn embed_sequence(
    model: &Autoencoder,
    standardizer: &Standardizer,
    video_id: &str,
    frames: &Tensor,
    clip_len: usize,
    stride: usize,
) -> Result<EmbeddingSequence> {
    let clips = split_clips(&standardizer.apply(frames)?, clip_len, stride)?;
    Ok(EmbeddingSequence::new(video_id, &embed_clips(model, &clips)?)?.quantized())
}

pub fn build_index(
    model: &Autoencoder,
    standardizer: &Standardizer,
    videos: &[DatasetVideo],
    clip_len: usize,
    stride: usize,
) -> Result<Index> {
    let records = videos
        .iter()
        .map(|v| {
            Ok(VideoRecord {
                class_label: v.class.clone(),
                embeddings: embed_sequence(model, standardizer, &v.video_id, &v.frames, clip_len, stride)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Index::new(model.config().embedding_dim, records)
}

/// Test queries cut from the labeled videos and embedded with `model`.
pub fn make_queries(
    model: &Autoencoder,
    standardizer: &Standardizer,
    videos: &[DatasetVideo],
    crop: &CropSpec,
    n_queries: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<QueryCase>> {
    let sources: Vec<SourceVideo<'_>> = videos
        .iter()
        .filter_map(|v| v.class.as_deref().map(|class| SourceVideo { video_id: &v.video_id, class, frames: &v.frames }))
        .collect();
    let clip_len = model.config().clip_len;
    generate_test_queries(&sources, n_queries, crop, clip_len, seed, |id, frames| {
        embed_sequence(model, standardizer, id, frames, clip_len, stride)
    })
}

/// Training settings compared by [`ablate`], in report order.
pub const ABLATION_SETTINGS: [&str; 5] =
    ["untrained", "ae-only", "triplet", "pretrain+triplet", "pretrain+triplet+challenging"];

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub model: ModelConfig,
    pub init_seed: u64,
    /// Epoch counts and rates; the stage toggles are set per row.
    pub train: TrainConfig,
    /// Compared against forward-only DTW with the same scope.
    pub bidtw: DtwConfig,
    pub crop: CropSpec,
    pub queries: usize,
    pub query_seed: u64,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub dtw_mode: String,
    pub dtw_scope: String,
    pub map_by_class: f64,
    pub map_by_clip: f64,
}

/// Trains every setting of [`ABLATION_SETTINGS`] and scores each with
/// forward DTW and with `plan.bidtw`. Rows come setting by setting, forward
/// first. The three pretrained settings share one run, observed after each
/// stage.
pub fn ablate(videos: &[DatasetVideo], plan: &AblationPlan) -> Result<Vec<AblationRow>> {
    let clip_len = plan.model.clip_len;
    let standardizer = fit_standardizer(videos)?;
    let (unlabeled, labeled) = training_clips(videos, &standardizer, clip_len, plan.stride)?;

    let untrained = Autoencoder::new(plan.model.clone(), plan.init_seed)?;
    let mut staged: Vec<(Stage, Autoencoder)> = Vec::new();
    let mut full = untrained.clone();
    let cfg = TrainConfig { pretrain: true, triplet: true, challenging: true, ..plan.train.clone() };
    train_schedule(&mut full, &unlabeled, &labeled, &cfg, &mut |stage, m| {
        staged.push((stage, m.clone()));
        Ok(())
    })?;
    let mut triplet_only = untrained.clone();
    let cfg = TrainConfig { pretrain: false, triplet: true, challenging: false, ..plan.train.clone() };
    train_schedule(&mut triplet_only, &unlabeled, &labeled, &cfg, &mut |_, _| Ok(()))?;

    let at = |stage: Stage| staged.iter().find(|(s, _)| *s == stage).map(|(_, m)| m).expect("stage observed");
    let models = [&untrained, at(Stage::Pretrain), &triplet_only, at(Stage::Triplet), at(Stage::Finetune)];
    let forward = DtwConfig { mode: BidtwMode::Forward, ..plan.bidtw };
    let mut rows = Vec::new();
    for (setting, model) in ABLATION_SETTINGS.iter().zip(models) {
        let index = build_index(model, &standardizer, videos, clip_len, plan.stride)?;
        let queries = make_queries(model, &standardizer, videos, &plan.crop, plan.queries, plan.stride, plan.query_seed)?;
        for dtw in [forward, plan.bidtw] {
            rows.push(AblationRow {
                setting: setting.to_string(),
                dtw_mode: dtw.mode.to_string(),
                dtw_scope: dtw.scope.to_string(),
                map_by_class: evaluate(&queries, &index, Protocol::ByClass, dtw)?.map(),
                map_by_clip: evaluate(&queries, &index, Protocol::ByClip, dtw)?.map(),
            });
        }
    }
    Ok(rows)
}

/// Markdown table of ablation rows.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| setting | dtw mode | dtw scope | mAP by class | mAP by clip |\n|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} |\n",
            r.setting, r.dtw_mode, r.dtw_scope, r.map_by_class, r.map_by_clip
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelVariant};
    use crate::store::{write_frames, write_manifest, ManifestEntry};

    #[test]
    fn load_resizes_and_builds_an_index() {
        let dir = tempfile::tempdir().unwrap();
        let video = Tensor::new(vec![8, 32, 32, 3], (0..8 * 32 * 32 * 3).map(|i| (i % 251) as f64 / 255.0).collect()).unwrap();
        write_frames(&dir.path().join("v"), &video).unwrap();
        let entry = ManifestEntry { video_id: "v".into(), class: Some("a".into()), frame_count: 8, source: "v".into() };
        write_manifest(&dir.path().join("manifest.jsonl"), &[entry]).unwrap();
        let videos = load_dataset(dir.path(), 3, 16).unwrap();
        assert_eq!(videos[0].frames.shape(), &[8, 16, 16, 3]);

        let model = Autoencoder::encoder_only(ModelConfig::desk(ModelVariant::M1), 0).unwrap();
        let st = fit_standardizer(&videos).unwrap();
        let index = build_index(&model, &st, &videos, 4, 2).unwrap();
        assert_eq!(index.records()[0].embeddings.len(), 3);
        let (unlabeled, labeled) = training_clips(&videos, &st, 4, 4).unwrap();
        assert!(unlabeled.is_empty());
        assert_eq!(labeled.len(), 2);
    }
}
