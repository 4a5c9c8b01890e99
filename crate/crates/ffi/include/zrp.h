#ifndef ZRP_H
#define ZRP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum ZrpKernel {
  ZRP_KERNEL_UNIFORM = 0,
  ZRP_KERNEL_RING = 1,
} ZrpKernel;

// Status codes; the nonzero library codes equal the CLI exit codes.
typedef enum ZrpStatus {
  ZRP_STATUS_OK = 0,
  ZRP_STATUS_DOMAIN = 2,
  ZRP_STATUS_RESOURCE = 3,
  ZRP_STATUS_TRUNCATION = 4,
  ZRP_STATUS_CONSISTENCY = 5,
  ZRP_STATUS_QUADRATURE = 6,
  ZRP_STATUS_REGIME = 7,
  ZRP_STATUS_FORMAT = 8,
  ZRP_STATUS_IO = 9,
  ZRP_STATUS_NULL_POINTER = 10,
  ZRP_STATUS_BUFFER_TOO_SMALL = 11,
  ZRP_STATUS_PANIC = 12,
} ZrpStatus;

typedef struct ZrpCanonical ZrpCanonical;

typedef struct ZrpModel ZrpModel;

typedef struct ZrpSampler ZrpSampler;

typedef struct ZrpSimulator ZrpSimulator;

typedef struct ZrpCriticalConstants {
  double z_c;
  double rho_c;
  // `INFINITY` when the critical variance does not exist.
  double sigma2;
} ZrpCriticalConstants;

// Message of the last failing call on this thread; empty if none. Valid
// until the next failing call on the same thread.
const char *zrp_last_error(void);

// Library version as a static NUL-terminated string.
const char *zrp_version(void);

// # Safety
// `out` must be valid for one pointer write.
enum ZrpStatus zrp_model_power_law(double b, struct ZrpModel **out);

// # Safety
// `out` must be valid for one pointer write.
enum ZrpStatus zrp_model_stretched(double beta, double lambda, struct ZrpModel **out);

// # Safety
// `model` must come from `zrp_model_*` and not be used afterwards; null is ignored.
void zrp_model_free(struct ZrpModel *model);

// Jump rate `g(k)`; 0 for `k = 0` or a null model.
//
// # Safety
// `model` must be a live handle or null.
double zrp_jump_rate(const struct ZrpModel *model, uint64_t k);

// # Safety
// `model` must be a live handle; `out` valid for one write.
enum ZrpStatus zrp_critical_constants(const struct ZrpModel *model,
                                      struct ZrpCriticalConstants *out);

// `Q_L(N) / (L W(N − ρ_c L))`.
//
// # Safety
// `model` must be a live handle; `out` valid for one write.
enum ZrpStatus zrp_llt_ratio(const struct ZrpModel *model,
                             size_t sites,
                             size_t particles,
                             double *out);

// Canonical measure on `L` sites with `N` particles.
//
// # Safety
// `model` must be a live handle; `out` valid for one pointer write.
enum ZrpStatus zrp_canonical_new(const struct ZrpModel *model,
                                 size_t sites,
                                 size_t particles,
                                 struct ZrpCanonical **out);

// # Safety
// `h` must come from `zrp_canonical_new` and not be used afterwards; null is ignored.
void zrp_canonical_free(struct ZrpCanonical *h);

// Natural log of the canonical probability of `occupation[0..len]`.
//
// # Safety
// `h` must be live, `occupation` readable for `len` values, `out` writable.
enum ZrpStatus zrp_canonical_log_prob(const struct ZrpCanonical *h,
                                      const uint64_t *occupation,
                                      size_t len,
                                      double *out);

// Probability that one site holds `k` particles.
//
// # Safety
// `h` must be live, `out` writable.
enum ZrpStatus zrp_canonical_site_marginal(const struct ZrpCanonical *h, size_t k, double *out);

// Exact sampler of the canonical measure (method chosen by size).
//
// # Safety
// `model` must be a live handle; `out` valid for one pointer write.
enum ZrpStatus zrp_sampler_new(const struct ZrpModel *model,
                               size_t sites,
                               size_t particles,
                               struct ZrpSampler **out);

// # Safety
// `h` must come from `zrp_sampler_new` and not be used afterwards; null is ignored.
void zrp_sampler_free(struct ZrpSampler *h);

// Draws one configuration from stream `(seed, stream)` into `out[0..L]`.
// The same `(seed, stream)` always gives the same configuration.
//
// # Safety
// `h` must be live and `out` writable for `capacity` values.
enum ZrpStatus zrp_sampler_draw(const struct ZrpSampler *h,
                                uint64_t seed,
                                uint64_t stream,
                                uint64_t *out,
                                size_t capacity);

// Continuous-time dynamics started from `occupation[0..len]`.
//
// # Safety
// `model` must be live, `occupation` readable for `len` values, `out`
// valid for one pointer write.
enum ZrpStatus zrp_simulator_new(const struct ZrpModel *model,
                                 const uint64_t *occupation,
                                 size_t len,
                                 enum ZrpKernel kernel,
                                 uint64_t seed,
                                 struct ZrpSimulator **out);

// # Safety
// `h` must come from `zrp_simulator_new` and not be used afterwards; null is ignored.
void zrp_simulator_free(struct ZrpSimulator *h);

// Runs the dynamics up to time `t_end`; `events` (optional) receives the
// number of particle jumps made by this call.
//
// # Safety
// `h` must be live; `events` null or writable.
enum ZrpStatus zrp_simulator_advance(struct ZrpSimulator *h, double t_end, uint64_t *events);

// Current time, or NaN for a null handle.
//
// # Safety
// `h` must be live or null.
double zrp_simulator_time(const struct ZrpSimulator *h);

// Copies the current configuration into `out[0..L]`.
//
// # Safety
// `h` must be live and `out` writable for `capacity` values.
enum ZrpStatus zrp_simulator_state(const struct ZrpSimulator *h, uint64_t *out, size_t capacity);

#endif  /* ZRP_H */
