#ifndef CONFPOSE_H
#define CONFPOSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CpStatus {
  CP_STATUS_OK = 0,
  CP_STATUS_NULL_POINTER = 1,
  CP_STATUS_INVALID_ARGUMENT = 2,
  // Input too degenerate to produce a result.
  CP_STATUS_DEGENERATE = 3,
  CP_STATUS_NOT_FOUND = 4,
  // Output buffer too small; the required length was written.
  CP_STATUS_BUFFER_TOO_SMALL = 5,
  CP_STATUS_INTERNAL = 6,
} CpStatus;

typedef enum CpWeighting {
  CP_WEIGHTING_SOFTMAX = 0,
  CP_WEIGHTING_SOFTMAX_LOG = 1,
  CP_WEIGHTING_UNIFORM = 2,
} CpWeighting;

// Opaque streaming state.
typedef struct CpStream CpStream;

// Streaming constants. `k == 0` fuses every reference.
typedef struct CpStreamConfig {
  double tau;
  size_t delta_max;
  size_t m_max;
  size_t n_cal;
  double tau_out;
  size_t n_rej;
  size_t l_max;
  size_t bridge_len;
  size_t k;
  // One of [`CpWeighting`].
  uint32_t weighting;
} CpStreamConfig;

typedef struct CpRefineConfig {
  double delta_rot;
  double delta_trans;
  size_t max_iters;
  double grad_tol;
  // Use the chordal rotation residual instead of the geodesic one.
  bool chordal;
} CpRefineConfig;

typedef struct CpPose {
  // Unit quaternion `w, x, y, z`.
  double q[4];
  double t[3];
} CpPose;

typedef struct CpEdge {
  uint64_t src;
  uint64_t dst;
  // Pose of `dst` in the frame of `src`.
  struct CpPose rel;
  double conf_rot;
  double conf_trans;
} CpEdge;

typedef struct CpCandidate {
  struct CpPose pose;
  double conf_rot;
  double conf_trans;
  uint64_t reference;
} CpCandidate;

typedef struct CpSim3 {
  double scale;
  // Rotation `w, x, y, z`.
  double q[4];
  double t[3];
} CpSim3;

typedef struct CpRefineResult {
  double initial_objective;
  double final_objective;
  size_t iterations;
  bool converged;
} CpRefineResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cp_version(void);

// Message of the last failed call on this thread, empty after a success.
// Valid until the next call into this library on the same thread.
const char *cp_last_error(void);

// # Safety
// `out` must be null or point to writable memory for one config.
enum CpStatus cp_stream_config_default(struct CpStreamConfig *out);

// # Safety
// `out` must be null or point to writable memory for one config.
enum CpStatus cp_refine_config_default(struct CpRefineConfig *out);

// Creates a stream. A null `config` uses the defaults.
//
// # Safety
// `config` must be null or valid; `out` must be writable.
enum CpStatus cp_stream_new(const struct CpStreamConfig *config, struct CpStream **out);

// # Safety
// `stream` must be null or a handle from [`cp_stream_new`] not yet freed.
void cp_stream_free(struct CpStream *stream);

// Frames the next frame must supply edges from, in ascending order.
// Writes the count to `out_len`; ids are written only if `cap` suffices.
//
// # Safety
// `stream` must be a live handle, `ids` writable for `cap` values (or null
// with `cap == 0`) and `out_len` writable.
enum CpStatus cp_stream_context(const struct CpStream *stream,
                                uint64_t *ids,
                                size_t cap,
                                size_t *out_len);

// Processes one frame. `edges` must contain an edge into `frame` from every
// context frame; extra edges are ignored. `out_accepted` is optional.
//
// # Safety
// `stream` must be a live handle; `token` readable for `token_len` values;
// `edges` readable for `n_edges` values; `out_accepted` null or writable.
enum CpStatus cp_stream_process(struct CpStream *stream,
                                uint64_t frame,
                                const double *token,
                                size_t token_len,
                                const struct CpEdge *edges,
                                size_t n_edges,
                                bool *out_accepted);

// Estimated pose of an accepted frame.
//
// # Safety
// `stream` must be a live handle and `out` writable.
enum CpStatus cp_stream_pose(const struct CpStream *stream, uint64_t frame, struct CpPose *out);

// # Safety
// `stream` must be a live handle and `out` writable.
enum CpStatus cp_stream_bank_size(const struct CpStream *stream, size_t *out);

// Fuses candidate poses for one frame. `k == 0` keeps every candidate;
// `weighting` is one of [`CpWeighting`].
//
// # Safety
// `candidates` readable for `n` values; `out` writable.
enum CpStatus cp_fuse_candidates(const struct CpCandidate *candidates,
                                 size_t n,
                                 size_t k,
                                 uint32_t weighting,
                                 struct CpPose *out);

// Similarity transform mapping `source` onto `target`, both `n` points
// stored as `x, y, z` triples.
//
// # Safety
// `source` and `target` readable for `3 * n` values; `out` writable.
enum CpStatus cp_umeyama_sim3(const double *source,
                              const double *target,
                              size_t n,
                              struct CpSim3 *out);

// Refines `n_nodes` poses against `n_edges` edges with node `fixed` held.
// Refined poses are written to `out_poses` in the order of `ids`. A null
// `config` uses the defaults; `out_result` is optional.
//
// # Safety
// `ids`, `poses` and `out_poses` valid for `n_nodes` values; `edges`
// readable for `n_edges`; `config` and `out_result` null or valid.
enum CpStatus cp_refine_solve(const uint64_t *ids,
                              const struct CpPose *poses,
                              size_t n_nodes,
                              const struct CpEdge *edges,
                              size_t n_edges,
                              uint64_t fixed,
                              const struct CpRefineConfig *config,
                              struct CpPose *out_poses,
                              struct CpRefineResult *out_result);

// Absolute trajectory RMSE of `estimate` against `reference`, matched by
// index, after Sim(3) alignment or rigid alignment when `sim3` is false.
//
// # Safety
// `estimate` and `reference` readable for `n` values; `out` writable.
enum CpStatus cp_ate(const struct CpPose *estimate,
                     const struct CpPose *reference,
                     size_t n,
                     bool sim3,
                     double *out);

// Copies the last error into `buf` (NUL terminated, truncated to fit).
// Returns the full message length excluding the terminator.
//
// # Safety
// `buf` must be writable for `cap` bytes, or null with `cap == 0`.
size_t cp_copy_last_error(char *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFPOSE_H */
