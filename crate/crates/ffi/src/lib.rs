//! C interface. Every fallible function returns a [`VsStatus`]; on failure
//! `vs_last_error_message` describes the error on the calling thread.
//! Handles are opaque and must be released with their `_free` function.
//!
//! # Safety
//!
//! Pointers passed in must be null or valid for the documented length, and
//! handles must come from this library and not be used after being freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;


use vidseq::dtw::{bidtw, rank_candidates, BidtwMode, DtwConfig, EmbeddingSequence, Scope};
use vidseq::eval::average_precision;
use vidseq::model::Autoencoder;
use vidseq::pipeline::embed_sequence;
use vidseq::store::{index_read, Index, Standardizer};
use vidseq::tensor::Tensor;
use vidseq::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Internal = 7,
    Panic = 8,
}

/// `mode` values for the DTW functions.
pub const VS_DTW_FORWARD: u32 = 0;
pub const VS_DTW_BOTH_REVERSED: u32 = 1;
pub const VS_DTW_ONE_REVERSED: u32 = 2;
/// `scope` values for the DTW functions.
pub const VS_SCOPE_FULL: u32 = 0;
pub const VS_SCOPE_SUBSEQUENCE: u32 = 1;

/// Encoder with the input standardization it was trained with.
pub struct VsModel {
    model: Autoencoder,
    standardizer: Standardizer,
}

pub struct VsSequence(EmbeddingSequence);

pub struct VsIndex(Index);

pub struct VsResults {
    ids: Vec<CString>,
    costs: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VsStatus {
    match e.kind() {
        "dimension-mismatch" => VsStatus::DimensionMismatch,
        "invalid-argument" => VsStatus::InvalidArgument,
        "config" => VsStatus::Config,
        "io" => VsStatus::Io,
        "format" | "image" | "json" => VsStatus::Format,
        _ => VsStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, turning errors and panics into a status and a message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            VsStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            VsStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn dtw_config(mode: u32, scope: u32) -> Result<DtwConfig, Fail> {
    let mode = match mode {
        VS_DTW_FORWARD => BidtwMode::Forward,
        VS_DTW_BOTH_REVERSED => BidtwMode::BothReversed,
        VS_DTW_ONE_REVERSED => BidtwMode::OneReversed,
        m => return Err(Fail::Lib(Error::InvalidArgument(format!("unknown DTW mode {m}")))),
    };
    let scope = match scope {
        VS_SCOPE_FULL => Scope::Full,
        VS_SCOPE_SUBSEQUENCE => Scope::Subsequence,
        s => return Err(Fail::Lib(Error::InvalidArgument(format!("unknown DTW scope {s}")))),
    };
    Ok(DtwConfig { mode, scope })
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("output handle"));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the encoder of a checkpoint. Checkpoints without stored
/// standardization use the raw pixel values.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_model_load(path: *const c_char, out: *mut *mut VsModel) -> VsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let (model, meta) = Autoencoder::load(Path::new(path), false)?;
        let standardizer = Standardizer::from_meta(&meta)
            .unwrap_or_else(|_| Standardizer::identity(model.config().input_channels));
        put(out, VsModel { model, standardizer })
    })
}

/// # Safety
/// `model` must be null or a handle from `vs_model_load`.
#[no_mangle]
pub unsafe extern "C" fn vs_model_free(model: *mut VsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_model_embedding_dim(model: *const VsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().embedding_dim)
}

/// Frames per clip, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_model_clip_len(model: *const VsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().clip_len)
}

/// Embeds an `(frames, height, width, channels)` row-major video, one clip
/// every `stride` frames.
///
/// # Safety
/// `pixels` must hold `frames * height * width * channels` values,
/// `video_id` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_model_embed_video(
    model: *const VsModel,
    video_id: *const c_char,
    pixels: *const f64,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    stride: usize,
    out: *mut *mut VsSequence,
) -> VsStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let id = str_arg(video_id, "video_id")?;
        let len = frames * height * width * channels;
        let data = slice_arg(pixels, len, "pixels")?.to_vec();
        let video = Tensor::new(vec![frames, height, width, channels], data)?;
        let cfg = m.model.config();
        let seq = embed_sequence(&m.model, &m.standardizer, id, &video, cfg.clip_len, stride)?;
        put(out, VsSequence(seq))
    })
}

/// Sequence of `len` embeddings of width `dim`, stored row by row.
///
/// # Safety
/// `data` must hold `len * dim` values, `video_id` must be a NUL-terminated
/// string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_sequence_new(
    video_id: *const c_char,
    data: *const f64,
    len: usize,
    dim: usize,
    out: *mut *mut VsSequence,
) -> VsStatus {
    guard(|| {
        let id = str_arg(video_id, "video_id")?;
        let values = slice_arg(data, len * dim, "data")?.to_vec();
        put(out, VsSequence(EmbeddingSequence::from_flat(id, dim, values)?))
    })
}

/// # Safety
/// `seq` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_sequence_free(seq: *mut VsSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}

/// Number of embeddings, or 0 for a null handle.
///
/// # Safety
/// `seq` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_sequence_len(seq: *const VsSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.0.len())
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `seq` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_sequence_dim(seq: *const VsSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.0.dim())
}

/// Row-major embeddings, `len * dim` values owned by the handle, or null
/// for a null handle.
///
/// # Safety
/// `seq` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_sequence_data(seq: *const VsSequence) -> *const f64 {
    seq.as_ref().map_or(std::ptr::null(), |s| s.0.data().as_ptr())
}

/// Alignment cost between two sequences.
///
/// # Safety
/// Handles must be live and `cost` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_sequence_distance(
    a: *const VsSequence,
    b: *const VsSequence,
    mode: u32,
    scope: u32,
    cost: *mut f64,
) -> VsStatus {
    guard(|| {
        let (a, b) = (non_null(a, "a")?, non_null(b, "b")?);
        let cfg = dtw_config(mode, scope)?;
        let c = bidtw(&a.0, &b.0, cfg.mode, cfg.scope)?;
        let out = cost.as_mut().ok_or(Fail::Null("cost"))?;
        *out = c;
        Ok(())
    })
}

/// DTW cost between raw row-major sequences `a` (`n x dim`) and `b`
/// (`m x dim`) with squared Euclidean local distance.
///
/// # Safety
/// `a` and `b` must hold `n * dim` and `m * dim` values, `cost` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_dtw(
    a: *const f64,
    n: usize,
    b: *const f64,
    m: usize,
    dim: usize,
    mode: u32,
    scope: u32,
    cost: *mut f64,
) -> VsStatus {
    guard(|| {
        let sa = EmbeddingSequence::from_flat("a", dim, slice_arg(a, n * dim, "a")?.to_vec())?;
        let sb = EmbeddingSequence::from_flat("b", dim, slice_arg(b, m * dim, "b")?.to_vec())?;
        let cfg = dtw_config(mode, scope)?;
        let c = bidtw(&sa, &sb, cfg.mode, cfg.scope)?;
        *cost.as_mut().ok_or(Fail::Null("cost"))? = c;
        Ok(())
    })
}

/// Average precision of the 1-based ranks of retrieved relevant items
/// (strictly increasing) out of `relevant` relevant items.
///
/// # Safety
/// `ranks` must hold `count` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_average_precision(
    ranks: *const usize,
    count: usize,
    relevant: usize,
    out: *mut f64,
) -> VsStatus {
    guard(|| {
        let ap = average_precision(slice_arg(ranks, count, "ranks")?, relevant)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = ap;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_index_open(path: *const c_char, out: *mut *mut VsIndex) -> VsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, VsIndex(index_read(Path::new(path))?))
    })
}

/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_index_free(index: *mut VsIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of videos, or 0 for a null handle.
///
/// # Safety
/// `index` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_index_len(index: *const VsIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// The `k` cheapest videos for `query`, cheapest first.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_index_query(
    index: *const VsIndex,
    query: *const VsSequence,
    k: usize,
    mode: u32,
    scope: u32,
    out: *mut *mut VsResults,
) -> VsStatus {
    guard(|| {
        let (index, query) = (non_null(index, "index")?, non_null(query, "query")?);
        let ranked = rank_candidates(&query.0, index.0.records(), k, dtw_config(mode, scope)?)?;
        let ids = ranked
            .iter()
            .map(|r| CString::new(r.video_id.as_str()).map_err(|_| Error::Corrupt("video id contains NUL".into())))
            .collect::<Result<_, _>>()?;
        put(out, VsResults { ids, costs: ranked.iter().map(|r| r.cost).collect() })
    })
}

/// Number of results, or 0 for a null handle.
///
/// # Safety
/// `results` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_results_len(results: *const VsResults) -> usize {
    results.as_ref().map_or(0, |r| r.ids.len())
}

/// Result `i`. The id pointer lives as long as the results handle.
///
/// # Safety
/// `results` must be live; `video_id` and `cost` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_results_get(
    results: *const VsResults,
    i: usize,
    video_id: *mut *const c_char,
    cost: *mut f64,
) -> VsStatus {
    guard(|| {
        let r = non_null(results, "results")?;
        if i >= r.ids.len() {
            return Err(Fail::Lib(Error::InvalidArgument(format!("result {i} of {}", r.ids.len()))));
        }
        if video_id.is_null() || cost.is_null() {
            return Err(Fail::Null("output"));
        }
        *video_id = r.ids[i].as_ptr();
        *cost = r.costs[i];
        Ok(())
    })
}

/// # Safety
/// `results` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vs_results_free(results: *mut VsResults) {
    if !results.is_null() {
        drop(Box::from_raw(results));
    }
}

