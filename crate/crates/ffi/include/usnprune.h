#ifndef USNPRUNE_H
#define USNPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  USN_STATUS_OK = 0,
  USN_STATUS_NULL_POINTER = 1,
  USN_STATUS_INVALID_ARGUMENT = 2,
  USN_STATUS_CONFIG = 3,
  USN_STATUS_CONTRACT = 4,
  USN_STATUS_NUMERIC = 5,
  USN_STATUS_IO = 6,
  USN_STATUS_PANIC = 7,
} UsnStatus;

typedef enum {
  USN_PERTURBATION_BRIGHTNESS = 0,
  USN_PERTURBATION_CONTRAST = 1,
} UsnPerturbation;

typedef enum {
  USN_VERDICT_HOLDS = 0,
  USN_VERDICT_VIOLATED = 1,
  USN_VERDICT_UNKNOWN = 2,
} UsnVerdict;

/**
 * Opaque network handle.
 */
typedef struct UsnNetwork UsnNetwork;

/**
 * Outcome of a grid certificate.
 */
typedef struct {
  UsnVerdict verdict;
  /**
   * `δ` minus the largest certified keypoint deviation bound.
   */
  double margin;
  double max_deviation;
  /**
   * Seconds.
   */
  double wall_time;
} UsnCertificate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a JSON checkpoint. On success `*out` owns a handle to be released
 * with [`usn_network_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
UsnStatus usn_network_load(const char *path_utf8, UsnNetwork **out);

/**
 * # Safety
 * `handle` must come from [`usn_network_load`]; `path` must be NUL-terminated.
 */
UsnStatus usn_network_save(const UsnNetwork *handle, const char *path_utf8);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `handle` must come from [`usn_network_load`] and not be used afterwards.
 */
void usn_network_free(UsnNetwork *handle);

/**
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
UsnStatus usn_network_input_len(const UsnNetwork *handle, size_t *out);

/**
 * Number of outputs: `2K` keypoint coordinates for a soft-argmax head.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
UsnStatus usn_network_output_len(const UsnNetwork *handle, size_t *out);

/**
 * Forward pass. `input_len` and `output_len` must match the network exactly.
 *
 * # Safety
 * `input` must hold `input_len` doubles and `output` room for `output_len`.
 */
UsnStatus usn_network_predict(const UsnNetwork *handle,
                              const double *input,
                              size_t input_len,
                              double *output,
                              size_t output_len);

/**
 * Lipschitz bound from the pre-activations of linear layer `layer`
 * (1-based) to the output; `layer = 0` gives the bound from the input.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
UsnStatus usn_network_lipschitz(const UsnNetwork *handle, size_t layer, double *out);

/**
 * Certifies that every keypoint stays within `delta` pixels (ℓ∞) for all
 * perturbation parameters within `epsilon`, refining `initial_cells`
 * uniform cells down to a resolution of `max_cells`.
 *
 * # Safety
 * `image` must hold `image_len` doubles; `out` must be a valid pointer.
 */
UsnStatus usn_certify(const UsnNetwork *handle,
                      const double *image,
                      size_t image_len,
                      UsnPerturbation kind,
                      double epsilon,
                      double delta,
                      size_t initial_cells,
                      size_t max_cells,
                      UsnCertificate *out);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * plus one, so a caller can size the buffer; 0 means no error.
 *
 * # Safety
 * `buf` must have room for `len` bytes, or be null with `len = 0`.
 */
size_t usn_last_error(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* USNPRUNE_H */
