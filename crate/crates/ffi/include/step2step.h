#ifndef STEP2STEP_H
#define STEP2STEP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum S2sStatus {
  S2S_STATUS_OK = 0,
  S2S_STATUS_NULL_POINTER = 1,
  S2S_STATUS_INVALID_ARGUMENT = 2,
  // Configuration, model or gait rejected.
  S2S_STATUS_CONFIG = 3,
  // Synthesis, fixed point, simulation or certification failed.
  S2S_STATUS_DOMAIN = 4,
  // Serialization or I/O failure.
  S2S_STATUS_INTERNAL = 5,
  // A panic was caught at the boundary.
  S2S_STATUS_PANIC = 6,
} S2sStatus;

// Certificate handle.
typedef struct S2sCertificate S2sCertificate;

// Gait handle.
typedef struct S2sGait S2sGait;

// Robot model handle.
typedef struct S2sModel S2sModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *s2s_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// NUL-terminated) and returns the full message length without the NUL.
// Returns 0 when the last call succeeded.
//
// # Safety
// `buf` must be null or point to at least `len` writable bytes.
size_t s2s_last_error_message(char *buf, size_t len);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void s2s_string_free(char *s);

// Built-in model by name (`"five_link"` or `"compass"`).
//
// # Safety
// `name` must be a NUL-terminated string; `out_model` must be writable.
enum S2sStatus s2s_model_builtin(const char *name, struct S2sModel **out_model);

// Model from its JSON description.
//
// # Safety
// `json` must be a NUL-terminated string; `out_model` must be writable.
enum S2sStatus s2s_model_from_json(const char *json, struct S2sModel **out_model);

// # Safety
// `model` must be null or a handle from this library, freed once.
void s2s_model_free(struct S2sModel *model);

// Synthesizes a periodic gait for the given step length (m), duration (s)
// and swing-foot clearance (m).
//
// # Safety
// `model` must be a valid handle; `out_gait` must be writable.
enum S2sStatus s2s_gait_synthesize(const struct S2sModel *model,
                                   double step_length,
                                   double step_duration,
                                   double step_height,
                                   uint64_t seed,
                                   struct S2sGait **out_gait);

// # Safety
// `json` must be a NUL-terminated string; `out_gait` must be writable.
enum S2sStatus s2s_gait_from_json(const char *json, struct S2sGait **out_gait);

// Gait file contents; release with [`s2s_string_free`].
//
// # Safety
// `gait` must be a valid handle; `out_json` must be writable.
enum S2sStatus s2s_gait_to_json(const struct S2sGait *gait, char **out_json);

// # Safety
// `gait` must be null or a handle from this library, freed once.
void s2s_gait_free(struct S2sGait *gait);

// Spectral radius of the linearized return map at the gait's fixed point.
//
// # Safety
// Handles must be valid; `out_radius` must be writable.
enum S2sStatus s2s_gait_spectral_radius(const struct S2sModel *model,
                                        const struct S2sGait *gait,
                                        double *out_radius);

// Rolls the gait out for up to `steps` impacts from its stored pre-impact
// state and reports how many completed. A fall is not an error.
//
// # Safety
// Handles must be valid; `out_steps` must be writable.
enum S2sStatus s2s_simulate(const struct S2sModel *model,
                            const struct S2sGait *gait,
                            size_t steps,
                            size_t *out_steps);

// Certifies a forward-invariant set around the gait's fixed point.
//
// # Safety
// Handles must be valid; `out_cert` must be writable.
enum S2sStatus s2s_certify(const struct S2sModel *model,
                           const struct S2sGait *gait,
                           double alpha,
                           double r_max,
                           size_t n_samples,
                           uint64_t seed,
                           struct S2sCertificate **out_cert);

// Certified squared radius.
//
// # Safety
// `cert` must be a valid handle; `out_r_star` must be writable.
enum S2sStatus s2s_certificate_r_star(const struct S2sCertificate *cert, double *out_r_star);

// Certificate document; release with [`s2s_string_free`].
//
// # Safety
// `cert` must be a valid handle; `out_json` must be writable.
enum S2sStatus s2s_certificate_to_json(const struct S2sCertificate *cert, char **out_json);

// # Safety
// `cert` must be null or a handle from this library, freed once.
void s2s_certificate_free(struct S2sCertificate *cert);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STEP2STEP_H */
