#ifndef CRL_LAB_H
#define CRL_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CrlStatus {
  CRL_STATUS_OK = 0,
  CRL_STATUS_NULL_POINTER = 1,
  // Malformed JSON, wrong buffer sizes or invalid parameters.
  CRL_STATUS_INVALID_ARGUMENT = 2,
  // Input outside the domain of a map or density.
  CRL_STATUS_DOMAIN = 3,
  // Singular matrices, non-convergence and other numerical failures.
  CRL_STATUS_NUMERICAL = 4,
  CRL_STATUS_INTERNAL = 5,
} CrlStatus;

// An invertible mixing map.
typedef struct CrlMixing CrlMixing;

// A structural causal model.
typedef struct CrlScm CrlScm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread. The pointer stays valid
// until the next failing call on the same thread.
const char *crl_last_error(void);

// Library version as a static NUL-terminated string.
const char *crl_version(void);

// Builds a mixing map from its JSON descriptor.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum CrlStatus crl_mixing_from_json(const char *json, struct CrlMixing **out);

// # Safety
// `map` must come from `crl_mixing_from_json` and not be used afterwards.
void crl_mixing_free(struct CrlMixing *map);

// Dimension of the map, or 0 for a null handle.
//
// # Safety
// `map` must be null or a live handle.
uintptr_t crl_mixing_dim(const struct CrlMixing *map);

// `x = f(s)`; both buffers hold `dim` values.
//
// # Safety
// Buffers must hold `len` doubles; `map` must be a live handle.
enum CrlStatus crl_mixing_forward(const struct CrlMixing *map,
                                  const double *s,
                                  double *x,
                                  uintptr_t len);

// `s = f⁻¹(x)`.
//
// # Safety
// Buffers must hold `len` doubles; `map` must be a live handle.
enum CrlStatus crl_mixing_inverse(const struct CrlMixing *map,
                                  const double *x,
                                  double *s,
                                  uintptr_t len);

// Jacobian of `f` at `s`, written row-major into `jac` (`len²` values).
//
// # Safety
// `s` must hold `len` doubles and `jac` `len * len`.
enum CrlStatus crl_mixing_jacobian(const struct CrlMixing *map,
                                   const double *s,
                                   uintptr_t len,
                                   double *jac);

// Local IMA contrast of `f` at `s`.
//
// # Safety
// `s` must hold `len` doubles and `out` be valid.
enum CrlStatus crl_mixing_local_ima(const struct CrlMixing *map,
                                    const double *s,
                                    uintptr_t len,
                                    double *out);

// Builds an SCM from its JSON descriptor.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum CrlStatus crl_scm_from_json(const char *json, struct CrlScm **out);

// # Safety
// `scm` must come from `crl_scm_from_json` and not be used afterwards.
void crl_scm_free(struct CrlScm *scm);

// Number of nodes, or 0 for a null handle.
//
// # Safety
// `scm` must be null or a live handle.
uintptr_t crl_scm_nodes(const struct CrlScm *scm);

// Draws `count` ancestral samples into `out` (row-major, `count × nodes`).
//
// # Safety
// `out` must hold `len` doubles.
enum CrlStatus crl_scm_sample(const struct CrlScm *scm,
                              uintptr_t count,
                              uint64_t seed,
                              double *out,
                              uintptr_t len);

// Joint log-density at `v`.
//
// # Safety
// `v` must hold `len` doubles and `out` be valid.
enum CrlStatus crl_scm_log_density(const struct CrlScm *scm,
                                   const double *v,
                                   uintptr_t len,
                                   double *out);

// Mean correlation coefficient between `z_hat` and `z`, both row-major
// `rows × cols`. Uses Spearman correlations when `rank` is true.
//
// # Safety
// Both buffers must hold `rows * cols` doubles and `out` be valid.
enum CrlStatus crl_mcc(const double *z_hat,
                       const double *z,
                       uintptr_t rows,
                       uintptr_t cols,
                       bool rank,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CRL_LAB_H */
