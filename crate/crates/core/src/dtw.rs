//! Dynamic time warping over embedding sequences, with an open-ended
//! subsequence variant and the bidirectional construction used to rank
//! candidates.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::EmbeddingVector;

/// Ordered per-clip embeddings of one video, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    video_id: String,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSequence {
    pub fn new(video_id: impl Into<String>, vectors: &[EmbeddingVector]) -> Result<Self> {
        let dim = vectors.first().ok_or(Error::Empty("embedding sequence"))?.len();
        let mut data = Vec::with_capacity(dim * vectors.len());
        for v in vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            data.extend_from_slice(v.values());
        }
        Ok(EmbeddingSequence { video_id: video_id.into(), dim, data })
    }

    /// `data` holds `data.len() / dim` vectors back to back.
    pub fn from_flat(video_id: impl Into<String>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::Empty("embedding sequence"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!("{} values do not split into vectors of {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding sequence contains non-finite values"));
        }
        Ok(EmbeddingSequence { video_id: video_id.into(), dim, data })
    }

    /// Sequence of scalars, handy for tests and examples.
    pub fn from_scalars(video_id: impl Into<String>, values: &[f64]) -> Result<Self> {
        Self::from_flat(video_id, 1, values.to_vec())
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn reversed(&self) -> Self {
        let data = self.data.chunks(self.dim).rev().flatten().copied().collect();
        EmbeddingSequence { video_id: self.video_id.clone(), dim: self.dim, data }
    }

    /// Copy with every value rounded to 32-bit precision, as stored in an
    /// index file.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| v as f32 as f64).collect();
        EmbeddingSequence { video_id: self.video_id.clone(), dim: self.dim, data }
    }

    pub fn with_id(mut self, video_id: impl Into<String>) -> Self {
        self.video_id = video_id.into();
        self
    }

    /// Contiguous run of vectors `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let data = self.data[start * self.dim..(start + len) * self.dim].to_vec();
        EmbeddingSequence { video_id: self.video_id.clone(), dim: self.dim, data }
    }
}

impl AsRef<EmbeddingSequence> for EmbeddingSequence {
    fn as_ref(&self) -> &EmbeddingSequence {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reversed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub cost: f64,
    /// Zero-based `(i, j)` cells from start to end. For a reversed match the
    /// indices refer to the reversed sequence(s).
    pub path: Vec<(usize, usize)>,
    pub direction: Direction,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(a: &EmbeddingSequence, b: &EmbeddingSequence) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch { expected: a.dim, found: b.dim });
    }
    Ok(())
}

/// Cumulative cost table; `open_start` drops the prefix penalty along the
/// first row so the alignment may begin at any column.
fn table(a: &EmbeddingSequence, b: &EmbeddingSequence, open_start: bool) -> Vec<f64> {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![0.0f64; n * m];
    for i in 0..n {
        let ai = a.get(i);
        for j in 0..m {
            let c = sq_dist(ai, b.get(j));
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) if open_start => 0.0,
                (0, _) => d[j - 1],
                (_, 0) => d[(i - 1) * m],
                _ => d[(i - 1) * m + j - 1].min(d[(i - 1) * m + j]).min(d[i * m + j - 1]),
            };
            d[i * m + j] = c + prev;
        }
    }
    d
}

/// Walks back from `(i, j)` preferring the diagonal, then an i-advance,
/// then a j-advance among equal-cost predecessors.
fn backtrace(d: &[f64], m: usize, mut i: usize, mut j: usize, open_start: bool) -> Vec<(usize, usize)> {
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        if i == 0 && open_start {
            break;
        }
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = d[(i - 1) * m + j - 1];
            let up = d[(i - 1) * m + j];
            let left = d[i * m + j - 1];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    path
}

/// Full alignment of `a` against `b`.
pub fn dtw(a: &EmbeddingSequence, b: &EmbeddingSequence) -> Result<AlignmentResult> {
    check(a, b)?;
    let (n, m) = (a.len(), b.len());
    let d = table(a, b, false);
    Ok(AlignmentResult { cost: d[n * m - 1], path: backtrace(&d, m, n - 1, m - 1, false), direction: Direction::Forward })
}

/// Aligns all of `query` against the best-matching contiguous stretch of
/// `candidate`. The earliest end column wins ties.
pub fn subsequence_dtw(query: &EmbeddingSequence, candidate: &EmbeddingSequence) -> Result<AlignmentResult> {
    check(query, candidate)?;
    let (n, m) = (query.len(), candidate.len());
    let d = table(query, candidate, true);
    let last = &d[(n - 1) * m..];
    let (end, &cost) = last
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .expect("non-empty candidate");
    Ok(AlignmentResult { cost, path: backtrace(&d, m, n - 1, end, true), direction: Direction::Forward })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BidtwMode {
    /// Plain forward alignment only.
    Forward,
    /// `min(DTW(a, b), DTW(rev a, rev b))`.
    BothReversed,
    /// `min(DTW(a, b), DTW(rev a, b))`.
    OneReversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Full,
    Subsequence,
}

impl BidtwMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BidtwMode::Forward => "forward",
            BidtwMode::BothReversed => "both-reversed",
            BidtwMode::OneReversed => "one-reversed",
        }
    }
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Full => "full",
            Scope::Subsequence => "subsequence",
        }
    }
}

impl fmt::Display for BidtwMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BidtwMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "forward" => Ok(BidtwMode::Forward),
            "both-reversed" => Ok(BidtwMode::BothReversed),
            "one-reversed" => Ok(BidtwMode::OneReversed),
            _ => Err(Error::Config(format!("unknown dtw mode `{s}`"))),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scope::Full),
            "subsequence" => Ok(Scope::Subsequence),
            _ => Err(Error::Config(format!("unknown dtw scope `{s}`"))),
        }
    }
}

/// Alignment settings used for ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DtwConfig {
    pub mode: BidtwMode,
    pub scope: Scope,
}

impl Default for DtwConfig {
    fn default() -> Self {
        DtwConfig { mode: BidtwMode::OneReversed, scope: Scope::Subsequence }
    }
}

fn align(a: &EmbeddingSequence, b: &EmbeddingSequence, scope: Scope) -> Result<AlignmentResult> {
    match scope {
        Scope::Full => dtw(a, b),
        Scope::Subsequence => subsequence_dtw(a, b),
    }
}

/// Best of the forward alignment and the reversed one picked by `mode`.
/// The forward direction wins ties.
pub fn bidtw_alignment(a: &EmbeddingSequence, b: &EmbeddingSequence, mode: BidtwMode, scope: Scope) -> Result<AlignmentResult> {
    let forward = align(a, b, scope)?;
    let reversed = match mode {
        BidtwMode::Forward => return Ok(forward),
        BidtwMode::BothReversed => align(&a.reversed(), &b.reversed(), scope)?,
        BidtwMode::OneReversed => align(&a.reversed(), b, scope)?,
    };
    Ok(if reversed.cost < forward.cost { AlignmentResult { direction: Direction::Reversed, ..reversed } } else { forward })
}

pub fn bidtw(a: &EmbeddingSequence, b: &EmbeddingSequence, mode: BidtwMode, scope: Scope) -> Result<f64> {
    Ok(bidtw_alignment(a, b, mode, scope)?.cost)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Ranked {
    pub video_id: String,
    pub cost: f64,
}

/// Scores every candidate (in parallel) and returns the `k` cheapest,
/// ascending by cost with ties broken by video id.
pub fn rank_candidates<T>(query: &EmbeddingSequence, candidates: &[T], k: usize, cfg: DtwConfig) -> Result<Vec<Ranked>>
where
    T: AsRef<EmbeddingSequence> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::Empty("candidate index"));
    }
    let costs: Vec<f64> = candidates
        .par_iter()
        .map(|c| bidtw(query, c.as_ref(), cfg.mode, cfg.scope))
        .collect::<Result<_>>()?;
    let mut ranked: Vec<Ranked> = candidates
        .iter()
        .zip(costs)
        .map(|(c, cost)| Ranked { video_id: c.as_ref().video_id().to_string(), cost })
        .collect();
    ranked.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.video_id.cmp(&b.video_id)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Serial version of [`rank_candidates`], kept for equivalence checks.
pub fn rank_candidates_serial<T: AsRef<EmbeddingSequence>>(
    query: &EmbeddingSequence,
    candidates: &[T],
    k: usize,
    cfg: DtwConfig,
) -> Result<Vec<Ranked>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate index"));
    }
    let mut ranked = candidates
        .iter()
        .map(|c| Ok(Ranked { video_id: c.as_ref().video_id().to_string(), cost: bidtw(query, c.as_ref(), cfg.mode, cfg.scope)? }))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| match a.cost.total_cmp(&b.cost) {
        Ordering::Equal => a.video_id.cmp(&b.video_id),
        o => o,
    });
    ranked.truncate(k);
    Ok(ranked)
}
