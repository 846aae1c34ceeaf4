#ifndef DOCPRUNE_H
#define DOCPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum DpStatus {
  DP_STATUS_OK = 0,
  DP_STATUS_NULL_ARGUMENT = 1,
  DP_STATUS_INVALID_UTF8 = 2,
  DP_STATUS_CONFIG_ERROR = 3,
  DP_STATUS_RUNTIME_ERROR = 4,
  DP_STATUS_PANIC = 5,
} DpStatus;

/**
 * Opaque pipeline handle.
 */
typedef struct DpPipeline DpPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dp_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into the library on the same thread.
 */
const char *dp_last_error(void);

/**
 * Builds a pipeline from a TOML config; null `config_toml` means defaults.
 *
 * # Safety
 * `config_toml` must be null or a valid NUL-terminated string; `out` must
 * be a valid pointer to writable storage.
 */
enum DpStatus dp_pipeline_new(const char *config_toml, struct DpPipeline **out);

/**
 * Releases a pipeline. Null is ignored.
 *
 * # Safety
 * `pipeline` must be null or come from [`dp_pipeline_new`] and not have
 * been freed.
 */
void dp_pipeline_free(struct DpPipeline *pipeline);

/**
 * Runs the pipeline on its configured corpus and returns the JSON report.
 *
 * # Safety
 * `pipeline` must come from [`dp_pipeline_new`]; `report_json` must be a
 * valid pointer. The returned string is freed with [`dp_string_free`].
 */
enum DpStatus dp_pipeline_run(const struct DpPipeline *pipeline, char **report_json);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void dp_string_free(char *s);

/**
 * Writes 1 where `p[i] >= eps` and 0 elsewhere into `out[0..n]`.
 *
 * # Safety
 * `p` and `out` must each point to `n` doubles.
 */
enum DpStatus dp_binarize(const double *p, size_t n, double eps, double *out);

/**
 * 2×2 max-pooling of a row-major `rows×cols` grid into
 * `out[0..rows*cols/4]`. Both sides must be even.
 *
 * # Safety
 * `p` must point to `rows*cols` doubles and `out` to `rows*cols/4`.
 */
enum DpStatus dp_merge_max(const double *p, size_t rows, size_t cols, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOCPRUNE_H */
