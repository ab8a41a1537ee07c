#pragma once

/* Generated by cbindgen from oplab-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define OPLAB_ABI_VERSION 1

typedef enum OplabStatus {
  OPLAB_STATUS_OK = 0,
  OPLAB_STATUS_NULL_POINTER = 1,
  OPLAB_STATUS_INVALID_ARGUMENT = 2,
  OPLAB_STATUS_SHAPE_MISMATCH = 3,
  OPLAB_STATUS_NUMERIC_ERROR = 4,
  OPLAB_STATUS_IO_ERROR = 5,
  OPLAB_STATUS_PANICKED = 6,
} OplabStatus;

// Opaque adapter handle: a frozen base weight plus the trainable
// low-rank adapter state (generator included for the op variants).
typedef struct OplabAdapter OplabAdapter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread. The pointer is
// valid until the next oplab call on the same thread.
const char *oplab_last_error_message(void);

uint32_t oplab_abi_version(void);

// Creates an adapter over a frozen `d_out x d_in` base weight given
// in row-major order. Variant codes: 0 plain LoRA, 1 op LoRA,
// 2 plain DoRA, 3 op DoRA. `hidden`/`latent` size the generator MLP
// for the op variants (ignored otherwise; pass e.g. 32 and 64).
//
// # Safety
// `base_weights` must point to `d_out * d_in` readable f64 values and
// `out` must be a valid destination pointer. The returned handle must
// be released with `oplab_adapter_free`.
enum OplabStatus oplab_adapter_new(uint32_t variant,
                                   size_t d_out,
                                   size_t d_in,
                                   size_t rank,
                                   double alpha,
                                   size_t hidden,
                                   size_t latent,
                                   uint64_t seed,
                                   const double *base_weights,
                                   struct OplabAdapter **out);

// # Safety
// `handle` must come from `oplab_adapter_new` / `oplab_adapter_import`
// and not have been freed already. Null is a no-op.
void oplab_adapter_free(struct OplabAdapter *handle);

// Applies the adapted layer to `cols` input columns: `x` is
// `d_in x cols` row-major, `out` receives `d_out x cols`.
//
// # Safety
// Pointers must cover the stated extents; `handle` must be live.
enum OplabStatus oplab_adapter_forward(const struct OplabAdapter *handle,
                                       const double *x,
                                       size_t cols,
                                       double *out);

// Writes the merged dense weight (`d_out x d_in`, row-major) into
// `out`: base plus scaled update, through the DoRA normalization for
// those variants. The adapter itself is unchanged.
//
// # Safety
// `out` must cover `d_out * d_in` f64 values; `handle` must be live.
enum OplabStatus oplab_adapter_merge(const struct OplabAdapter *handle, double *out);

// Fits the adapter to targets under the squared loss
// `0.5/n * ||forward(x) - y||_F^2` with warmup + linear-decay
// scheduling. Optimizer codes: 0 SGD, 1 momentum, 2 Adam. On success
// `final_loss` (optional) receives the post-training loss.
//
// # Safety
// `x` must cover `d_in * n` values, `y` `d_out * n`; `handle` must be
// live and not used concurrently.
enum OplabStatus oplab_adapter_train(struct OplabAdapter *handle,
                                     const double *x,
                                     const double *y,
                                     size_t n,
                                     uint64_t steps,
                                     uint64_t warmup,
                                     double lr,
                                     uint32_t optimizer,
                                     double *final_loss);

// Writes the plain `(A, B[, m])` record (binary, little-endian) for
// the adapter's current state; the generator is discarded.
//
// # Safety
// `path` must be a valid NUL-terminated UTF-8 string.
enum OplabStatus oplab_adapter_export(const struct OplabAdapter *handle, const char *path);

// Rebuilds a plain adapter from an exported record over the given
// base weight.
//
// # Safety
// As for `oplab_adapter_new`; `path` must be NUL-terminated UTF-8.
enum OplabStatus oplab_adapter_import(const double *base_weights,
                                      size_t d_out,
                                      size_t d_in,
                                      const char *path,
                                      struct OplabAdapter **out);

// Effective rank (spectral entropy, sum normalization) of a dense
// row-major matrix. For the all-zero matrix the value is 1 and
// `degenerate` (optional) is set.
//
// # Safety
// `m` must cover `rows * cols` values; `out` must be valid.
enum OplabStatus oplab_effective_rank(const double *m,
                                      size_t rows,
                                      size_t cols,
                                      double *out,
                                      bool *degenerate);

// Squared Frobenius error of the best rank-`rank` approximation
// (the Eckart-Young optimum).
//
// # Safety
// `m` must cover `rows * cols` values; `out` must be valid.
enum OplabStatus oplab_best_rank_error(const double *m,
                                       size_t rows,
                                       size_t cols,
                                       size_t rank,
                                       double *out);

// Ratio of the largest to smallest significant singular value;
// +infinity when only one survives the cutoff.
//
// # Safety
// `m` must cover `rows * cols` values; `out` must be valid.
enum OplabStatus oplab_condition_number(const double *m, size_t rows, size_t cols, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus
