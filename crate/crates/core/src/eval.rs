//! Average precision, the two relevance protocols and cropped test queries.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dtw::{rank_candidates, DtwConfig, EmbeddingSequence, Ranked};
use crate::error::{Error, Result};
use crate::store::{write_atomic, Index, VideoRecord};
use crate::tensor::Tensor;

/// `(1/n) * sum_i i / r_i` over the 1-based ranks `r_i` of the relevant
/// items that were retrieved. Relevant items never retrieved add nothing.
pub fn average_precision(ranks: &[usize], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("average precision needs at least one relevant item"));
    }
    if ranks.len() > n {
        return Err(Error::invalid(format!("{} ranks for {n} relevant items", ranks.len())));
    }
    let mut prev = 0;
    let mut sum = 0.0;
    for (i, &r) in ranks.iter().enumerate() {
        if r <= prev {
            return Err(Error::invalid(format!("ranks must be positive and strictly increasing, got {ranks:?}")));
        }
        prev = r;
        sum += (i + 1) as f64 / r as f64;
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Relevant iff the retrieved video has the query's class.
    ByClass,
    /// Relevant iff the retrieved video is the one the query was cut from.
    ByClip,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::ByClass => "by-class",
            Protocol::ByClip => "by-clip",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "by-class" => Ok(Protocol::ByClass),
            "by-clip" => Ok(Protocol::ByClip),
            _ => Err(Error::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryCase {
    pub query: EmbeddingSequence,
    pub truth_video_id: String,
    pub truth_class: String,
    /// Source frames the query was built from, in query order.
    pub frame_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub query_id: String,
    pub truth_video_id: String,
    pub truth_class: String,
    pub relevant: usize,
    pub ranks: Vec<usize>,
    pub ap: f64,
    pub top: Vec<Ranked>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub protocol: Protocol,
    pub dtw_mode: String,
    pub dtw_scope: String,
    pub queries: usize,
    pub candidates: usize,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub queries: Vec<QueryResult>,
}

impl EvalReport {
    pub fn map(&self) -> f64 {
        self.summary.map
    }

    /// One JSON object per query, then `{"summary": ...}`.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for q in &self.queries {
            serde_json::to_writer(&mut out, q)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &serde_json::json!({ "summary": &self.summary }))?;
        out.write_all(b"\n")?;
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_jsonl()?)
    }
}

/// Number of top results kept in each [`QueryResult`].
pub const REPORT_TOP: usize = 10;

/// Ranks the whole index for every query and averages per-query AP.
/// Under `ByClass`, unlabeled records are left out of the candidate set.
pub fn evaluate(queries: &[QueryCase], index: &Index, protocol: Protocol, dtw: DtwConfig) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let candidates: Vec<&VideoRecord> = match protocol {
        Protocol::ByClip => index.records().iter().collect(),
        Protocol::ByClass => {
            let labeled: Vec<&VideoRecord> = index.records().iter().filter(|r| r.class_label.is_some()).collect();
            if labeled.len() < index.len() {
                log::warn!("{} unlabeled videos excluded from by-class evaluation", index.len() - labeled.len());
            }
            labeled
        }
    };
    if candidates.is_empty() {
        return Err(Error::Empty("candidate index"));
    }
    let seqs: Vec<&EmbeddingSequence> = candidates.iter().map(|r| &r.embeddings).collect();
    let mut results = Vec::with_capacity(queries.len());
    for q in queries {
        let relevant = |id: &str| -> bool {
            match protocol {
                Protocol::ByClip => id == q.truth_video_id,
                Protocol::ByClass => {
                    candidates.iter().any(|r| r.video_id() == id && r.class_label.as_deref() == Some(&q.truth_class))
                }
            }
        };
        let n = candidates.iter().filter(|r| relevant(r.video_id())).count();
        if n == 0 {
            return Err(Error::invalid(format!(
                "query {} has no relevant video in the index ({protocol})",
                q.query.video_id()
            )));
        }
        let ranking = rank_candidates(&q.query, &seqs, seqs.len(), dtw)?;
        let ranks: Vec<usize> =
            ranking.iter().enumerate().filter(|(_, r)| relevant(&r.video_id)).map(|(i, _)| i + 1).collect();
        let ap = average_precision(&ranks, n)?;
        results.push(QueryResult {
            query_id: q.query.video_id().to_string(),
            truth_video_id: q.truth_video_id.clone(),
            truth_class: q.truth_class.clone(),
            relevant: n,
            ranks,
            ap,
            top: ranking.into_iter().take(REPORT_TOP).collect(),
        });
    }
    let map = results.iter().map(|r| r.ap).sum::<f64>() / results.len() as f64;
    Ok(EvalReport {
        summary: EvalSummary {
            protocol,
            dtw_mode: dtw.mode.to_string(),
            dtw_scope: dtw.scope.to_string(),
            queries: results.len(),
            candidates: candidates.len(),
            map,
        },
        queries: results,
    })
}

/// How a query is reversed in time, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reversal {
    None,
    /// Clip blocks in reverse order, each clip still playing forward.
    ClipOrder,
    /// Every frame in reverse order.
    Frames,
}

/// How test queries are cut from a source video. `runs` stretches of
/// `run_frames` consecutive frames are taken in order with gaps of
/// `0..=max_gap` frames between them. `run_frames == 0` takes the whole
/// video as one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub runs: usize,
    pub run_frames: usize,
    pub max_gap: usize,
    pub reversal: Reversal,
    /// Share of queries that get `reversal` applied.
    pub reverse_fraction: f64,
}

impl CropSpec {
    pub fn full() -> Self {
        CropSpec { runs: 1, run_frames: 0, max_gap: 0, reversal: Reversal::None, reverse_fraction: 0.0 }
    }
}

/// A video queries can be cut from.
#[derive(Debug, Clone, Copy)]
pub struct SourceVideo<'a> {
    pub video_id: &'a str,
    pub class: &'a str,
    /// `(M, spatial..., C)`.
    pub frames: &'a Tensor,
}

fn crop_indices(m: usize, crop: &CropSpec, clip_len: usize, rng: &mut impl Rng) -> Option<Vec<usize>> {
    if crop.run_frames == 0 {
        let usable = m - m % clip_len.max(1);
        return (usable > 0).then(|| (0..usable).collect());
    }
    let gaps: Vec<usize> = (1..crop.runs).map(|_| rng.gen_range(0..=crop.max_gap)).collect();
    let span = crop.runs * crop.run_frames + gaps.iter().sum::<usize>();
    if span > m {
        return None;
    }
    let mut pos = rng.gen_range(0..=m - span);
    let mut out = Vec::with_capacity(crop.runs * crop.run_frames);
    for r in 0..crop.runs {
        out.extend(pos..pos + crop.run_frames);
        pos += crop.run_frames + gaps.get(r).copied().unwrap_or(0);
    }
    Some(out)
}

/// Builds `n_queries` queries by cropping randomly chosen videos and
/// embedding the crops with `embed`. Videos too short for the crop are
/// skipped with a warning, so fewer queries may come back.
pub fn generate_test_queries<F>(
    videos: &[SourceVideo<'_>],
    n_queries: usize,
    crop: &CropSpec,
    clip_len: usize,
    seed: u64,
    embed: F,
) -> Result<Vec<QueryCase>>
where
    F: Fn(&str, &Tensor) -> Result<EmbeddingSequence>,
{
    if videos.is_empty() {
        return Err(Error::Empty("source videos"));
    }
    if crop.run_frames % clip_len.max(1) != 0 || crop.runs == 0 {
        return Err(Error::invalid(format!(
            "crop runs must be a positive number of whole clips ({} frames per run, clip length {clip_len})",
            crop.run_frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_queries);
    for q in 0..n_queries {
        let v = &videos[rng.gen_range(0..videos.len())];
        let m = v.frames.shape()[0];
        let Some(mut idx) = crop_indices(m, crop, clip_len, &mut rng) else {
            log::warn!("video {} has {m} frames, too short for the crop; skipped", v.video_id);
            continue;
        };
        if rng.gen_bool(crop.reverse_fraction.clamp(0.0, 1.0)) {
            match crop.reversal {
                Reversal::None => {}
                Reversal::Frames => idx.reverse(),
                Reversal::ClipOrder => {
                    idx = idx.chunks(clip_len).rev().flatten().copied().collect();
                }
            }
        }
        let frames = v.frames.unstack();
        let picked: Vec<Tensor> = idx.iter().map(|&i| frames[i].clone()).collect();
        let query_id = format!("query{q:05}");
        let query = embed(&query_id, &Tensor::stack(&picked)?)?.with_id(query_id);
        out.push(QueryCase {
            query,
            truth_video_id: v.video_id.to_string(),
            truth_class: v.class.to_string(),
            frame_indices: idx,
        });
    }
    Ok(out)
}
