#ifndef MSVQ_H
#define MSVQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values are stable.
 */
typedef enum {
  MSVQ_STATUS_OK = 0,
  MSVQ_STATUS_NULL_POINTER = 1,
  MSVQ_STATUS_INVALID_ARGUMENT = 2,
  MSVQ_STATUS_INVALID_INPUT = 3,
  MSVQ_STATUS_CONFIG = 4,
  MSVQ_STATUS_FINGERPRINT_MISMATCH = 5,
  MSVQ_STATUS_NUMERIC = 6,
  MSVQ_STATUS_FORMAT = 7,
  MSVQ_STATUS_IO = 8,
  MSVQ_STATUS_BUFFER_TOO_SMALL = 9,
  MSVQ_STATUS_PANIC = 10,
} MsvqStatus;

/**
 * Opaque multi-head codebook.
 */
typedef struct MsvqCodebook MsvqCodebook;

/**
 * Opaque feature sequence.
 */
typedef struct MsvqFeatures MsvqFeatures;

/**
 * Opaque set of trained artifacts.
 */
typedef struct MsvqModel MsvqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *msvq_last_error_message(void);

/**
 * Loads a codebook file written by `train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
MsvqStatus msvq_codebook_load(const char *path, MsvqCodebook **out);

/**
 * Builds a codebook from `heads * codewords * head_dim` head-major values.
 *
 * # Safety
 * `data` must point to that many doubles and `out` must be writable.
 */
MsvqStatus msvq_codebook_new(size_t heads,
                             size_t codewords,
                             size_t head_dim,
                             const double *data,
                             MsvqCodebook **out);

/**
 * # Safety
 * `cb` must be null or a handle from this library that has not been freed.
 */
void msvq_codebook_free(MsvqCodebook *cb);

/**
 * Writes heads, codewords and per-head dimension.
 *
 * # Safety
 * All pointers must be valid; `cb` must be a live handle.
 */
MsvqStatus msvq_codebook_dims(const MsvqCodebook *cb,
                              size_t *heads,
                              size_t *codewords,
                              size_t *head_dim);

/**
 * Quantizes one vector of `len == heads * head_dim` values, writing one index per head
 * into `indices` (capacity `indices_len`) and, when `quantized` is non-null, the
 * reconstructed vector.
 *
 * # Safety
 * Buffers must be valid for their stated lengths; `quantized` holds `len` doubles.
 */
MsvqStatus msvq_quantize(const MsvqCodebook *cb,
                         const double *x,
                         size_t len,
                         uint32_t *indices,
                         size_t indices_len,
                         double *quantized);

/**
 * Concatenated codewords for one index per head; `out` holds `heads * head_dim` doubles.
 *
 * # Safety
 * Buffers must be valid for their stated lengths.
 */
MsvqStatus msvq_dequantize(const MsvqCodebook *cb,
                           const uint32_t *indices,
                           size_t indices_len,
                           double *out,
                           size_t out_len);

/**
 * Reads a feature file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
MsvqStatus msvq_features_load(const char *path, MsvqFeatures **out);

/**
 * # Safety
 * `f` must be null or a live handle.
 */
void msvq_features_free(MsvqFeatures *f);

/**
 * Frame count and dimension.
 *
 * # Safety
 * All pointers must be valid.
 */
MsvqStatus msvq_features_dims(const MsvqFeatures *f, size_t *frames, size_t *dim);

/**
 * Copies the row-major frames into `out`, which holds at least `frames * dim` doubles.
 *
 * # Safety
 * `out` must be valid for `out_len` doubles.
 */
MsvqStatus msvq_features_copy(const MsvqFeatures *f, double *out, size_t out_len);

/**
 * Loads the artifact directory written by `train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
MsvqStatus msvq_model_load(const char *dir, MsvqModel **out);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
void msvq_model_free(MsvqModel *m);

/**
 * Number of stages and bits per stage-1 frame.
 *
 * # Safety
 * All pointers must be valid.
 */
MsvqStatus msvq_model_info(const MsvqModel *m, size_t *stages, double *bits_per_frame);

/**
 * Feature file to MSMCR token file.
 *
 * # Safety
 * `m` must be a live handle; paths NUL-terminated.
 */
MsvqStatus msvq_encode_file(const MsvqModel *m, const char *input, const char *output);

/**
 * MSMCR token file to feature file.
 *
 * # Safety
 * `m` must be a live handle; paths NUL-terminated.
 */
MsvqStatus msvq_decode_file(const MsvqModel *m, const char *input, const char *output);

/**
 * MSMCR token file to compact code file.
 *
 * # Safety
 * `m` must be a live handle; paths NUL-terminated.
 */
MsvqStatus msvq_compress_file(const MsvqModel *m, const char *input, const char *output);

/**
 * Compact code file to MSMCR token file.
 *
 * # Safety
 * `m` must be a live handle; paths NUL-terminated.
 */
MsvqStatus msvq_reconstruct_file(const MsvqModel *m, const char *input, const char *output);

/**
 * Frechet distance between the Gaussian statistics of two row-major embedding sets,
 * multiplied by `scale`.
 *
 * # Safety
 * `a` holds `a_rows * dim` doubles and `b` holds `b_rows * dim`; `out` is writable.
 */
MsvqStatus msvq_frechet_distance(const double *a,
                                 size_t a_rows,
                                 const double *b,
                                 size_t b_rows,
                                 size_t dim,
                                 double scale,
                                 double *out);

/**
 * Character error rate (`words == 0`) or word error rate between two UTF-8 strings.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` writable.
 */
MsvqStatus msvq_error_rate(const char *reference,
                           const char *hypothesis,
                           int32_t words,
                           double *out);

/**
 * Mel-cepstral distortion between two feature handles of equal shape.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
MsvqStatus msvq_mcd(const MsvqFeatures *a, const MsvqFeatures *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSVQ_H */
