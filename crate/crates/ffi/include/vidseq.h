#ifndef VIDSEQ_H
#define VIDSEQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// `mode` values for the DTW functions.
#define VS_DTW_FORWARD 0

#define VS_DTW_BOTH_REVERSED 1

#define VS_DTW_ONE_REVERSED 2

// `scope` values for the DTW functions.
#define VS_SCOPE_FULL 0

#define VS_SCOPE_SUBSEQUENCE 1

typedef enum VsStatus {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_DIMENSION_MISMATCH = 3,
  VS_STATUS_IO = 4,
  VS_STATUS_FORMAT = 5,
  VS_STATUS_CONFIG = 6,
  VS_STATUS_INTERNAL = 7,
  VS_STATUS_PANIC = 8,
} VsStatus;

typedef struct VsIndex VsIndex;

// Encoder with the input standardization it was trained with.
typedef struct VsModel VsModel;

typedef struct VsResults VsResults;

typedef struct VsSequence VsSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread. The pointer stays
// valid until the next failing call on the same thread.
const char *vs_last_error_message(void);

// Loads the encoder of a checkpoint. Checkpoints without stored
// standardization use the raw pixel values.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VsStatus vs_model_load(const char *path, struct VsModel **out);

// # Safety
// `model` must be null or a handle from `vs_model_load`.
void vs_model_free(struct VsModel *model);

// Embedding width, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t vs_model_embedding_dim(const struct VsModel *model);

// Frames per clip, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t vs_model_clip_len(const struct VsModel *model);

// Embeds an `(frames, height, width, channels)` row-major video, one clip
// every `stride` frames.
//
// # Safety
// `pixels` must hold `frames * height * width * channels` values,
// `video_id` must be a NUL-terminated string and `out` writable.
enum VsStatus vs_model_embed_video(const struct VsModel *model,
                                   const char *video_id,
                                   const double *pixels,
                                   size_t frames,
                                   size_t height,
                                   size_t width,
                                   size_t channels,
                                   size_t stride,
                                   struct VsSequence **out);

// Sequence of `len` embeddings of width `dim`, stored row by row.
//
// # Safety
// `data` must hold `len * dim` values, `video_id` must be a NUL-terminated
// string and `out` writable.
enum VsStatus vs_sequence_new(const char *video_id,
                              const double *data,
                              size_t len,
                              size_t dim,
                              struct VsSequence **out);

// # Safety
// `seq` must be null or a live handle.
void vs_sequence_free(struct VsSequence *seq);

// Number of embeddings, or 0 for a null handle.
//
// # Safety
// `seq` must be null or a live handle.
size_t vs_sequence_len(const struct VsSequence *seq);

// Embedding width, or 0 for a null handle.
//
// # Safety
// `seq` must be null or a live handle.
size_t vs_sequence_dim(const struct VsSequence *seq);

// Row-major embeddings, `len * dim` values owned by the handle, or null
// for a null handle.
//
// # Safety
// `seq` must be null or a live handle.
const double *vs_sequence_data(const struct VsSequence *seq);

// Alignment cost between two sequences.
//
// # Safety
// Handles must be live and `cost` writable.
enum VsStatus vs_sequence_distance(const struct VsSequence *a,
                                   const struct VsSequence *b,
                                   uint32_t mode,
                                   uint32_t scope,
                                   double *cost);

// DTW cost between raw row-major sequences `a` (`n x dim`) and `b`
// (`m x dim`) with squared Euclidean local distance.
//
// # Safety
// `a` and `b` must hold `n * dim` and `m * dim` values, `cost` writable.
enum VsStatus vs_dtw(const double *a,
                     size_t n,
                     const double *b,
                     size_t m,
                     size_t dim,
                     uint32_t mode,
                     uint32_t scope,
                     double *cost);

// Average precision of the 1-based ranks of retrieved relevant items
// (strictly increasing) out of `relevant` relevant items.
//
// # Safety
// `ranks` must hold `count` values and `out` be writable.
enum VsStatus vs_average_precision(const size_t *ranks, size_t count, size_t relevant, double *out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VsStatus vs_index_open(const char *path, struct VsIndex **out);

// # Safety
// `index` must be null or a live handle.
void vs_index_free(struct VsIndex *index);

// Number of videos, or 0 for a null handle.
//
// # Safety
// `index` must be null or a live handle.
size_t vs_index_len(const struct VsIndex *index);

// The `k` cheapest videos for `query`, cheapest first.
//
// # Safety
// Handles must be live and `out` writable.
enum VsStatus vs_index_query(const struct VsIndex *index,
                             const struct VsSequence *query,
                             size_t k,
                             uint32_t mode,
                             uint32_t scope,
                             struct VsResults **out);

// Number of results, or 0 for a null handle.
//
// # Safety
// `results` must be null or a live handle.
size_t vs_results_len(const struct VsResults *results);

// Result `i`. The id pointer lives as long as the results handle.
//
// # Safety
// `results` must be live; `video_id` and `cost` writable.
enum VsStatus vs_results_get(const struct VsResults *results,
                             size_t i,
                             const char **video_id,
                             double *cost);

// # Safety
// `results` must be null or a live handle.
void vs_results_free(struct VsResults *results);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIDSEQ_H */
