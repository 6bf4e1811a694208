#ifndef KNEELAB_H
#define KNEELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KlStatus {
  KL_STATUS_OK = 0,
  KL_STATUS_NULL_POINTER = 1,
  KL_STATUS_INVALID_ARGUMENT = 2,
  KL_STATUS_PARSE_ERROR = 3,
  KL_STATUS_OUT_OF_RANGE = 4,
  KL_STATUS_NUMERIC = 5,
  KL_STATUS_PANIC = 6,
} KlStatus;

typedef struct KlLandscape KlLandscape;

typedef struct KlOptimizer KlOptimizer;

typedef struct KlSchedule KlSchedule;

typedef struct KlLandscapeParams {
  size_t n_wide;
  double c_wide;
  size_t n_narrow;
  double c_narrow;
  size_t dim;
  double domain_box;
  uint64_t seed;
  double noise_sigma;
} KlLandscapeParams;

typedef struct KlSharpnessConfig {
  double epsilon;
  size_t iterations;
  double ascent_lr;
  size_t restarts;
  uint64_t seed;
} KlSharpnessConfig;

// Objective callback: returns `f(x)` and writes the gradient into `grad`.
// Both arrays have length `n`.
typedef double (*KlObjectiveFn)(void *user, const double *x, size_t n, double *grad);

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len - 1` bytes) and returns the full message length.
// Pass a null `buf` to query the length.
//
// # Safety
//
// `buf` is null or valid for `len` writable bytes.
size_t kl_last_error_message(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *kl_version(void);

// Builds a schedule from its JSON spec, for example
// `{"kind":"knee","total_steps":200,"seed_lr":0.1,"knee_explore_steps":100}`.
//
// # Safety
//
// `json` is a NUL-terminated string and `out` is valid for one write.
enum KlStatus kl_schedule_from_json(const char *json, struct KlSchedule **out);

// # Safety
//
// `schedule` comes from `kl_schedule_from_json` and `lr` is valid for one write.
enum KlStatus kl_schedule_lr_at(const struct KlSchedule *schedule, uint64_t step, double *lr);

// # Safety
//
// `schedule` comes from `kl_schedule_from_json` and `total` is valid for one write.
enum KlStatus kl_schedule_total_steps(const struct KlSchedule *schedule, uint64_t *total);

// # Safety
//
// `schedule` is null or an unfreed handle from `kl_schedule_from_json`.
void kl_schedule_free(struct KlSchedule *schedule);

// Creates an optimizer over `n_params` values from its JSON
// hyperparameters, for example `{"algorithm":"adam"}`. The parameters form
// a single LAMB segment.
//
// # Safety
//
// `hyper_json` is a NUL-terminated string and `out` is valid for one write.
enum KlStatus kl_optimizer_new(const char *hyper_json, size_t n_params, struct KlOptimizer **out);

// One update of `params` (length `n`) in place from `grad`.
//
// # Safety
//
// `opt` comes from `kl_optimizer_new`; `params` and `grad` hold `n` doubles.
enum KlStatus kl_optimizer_step(struct KlOptimizer *opt,
                                double *params,
                                const double *grad,
                                size_t n,
                                double lr);

// # Safety
//
// `opt` is null or an unfreed handle from `kl_optimizer_new`.
void kl_optimizer_free(struct KlOptimizer *opt);

// # Safety
//
// `params` points to a filled `KlLandscapeParams` and `out` is valid for one write.
enum KlStatus kl_landscape_build(const struct KlLandscapeParams *params, struct KlLandscape **out);

// Writes `F(x)` to `value` and its gradient to `grad` (both length `dim`).
//
// # Safety
//
// `land` comes from `kl_landscape_build`; `x` and `grad` hold `dim`
// doubles and `value` is valid for one write.
enum KlStatus kl_landscape_value_grad(const struct KlLandscape *land,
                                      const double *x,
                                      size_t dim,
                                      double *value,
                                      double *grad);

// Runs `trials` noisy walks under a knee schedule of `explore_steps` at
// `seed_lr` followed by `decay_steps` of linear decay.
//
// # Safety
//
// `land` comes from `kl_landscape_build`; each out pointer is valid for one write.
enum KlStatus kl_landscape_landing_fraction(const struct KlLandscape *land,
                                            double seed_lr,
                                            uint64_t explore_steps,
                                            uint64_t decay_steps,
                                            size_t trials,
                                            uint64_t base_seed,
                                            double *wide_fraction,
                                            double *diverged_fraction);

// # Safety
//
// `land` is null or an unfreed handle from `kl_landscape_build`.
void kl_landscape_free(struct KlLandscape *land);

// Default Keskar settings: epsilon 1e-4, 1000 iterations, ascent lr 1e-3,
// 3 restarts, seed 0.
struct KlSharpnessConfig kl_sharpness_config_default(void);

// Keskar sharpness of the callback objective at `x` (length `n`).
//
// # Safety
//
// `x` holds `n` doubles, `f` is safe to call with `user` on vectors of
// length `n`, `config` is null or valid, and `score` is valid for one write.
enum KlStatus kl_keskar_sharpness(KlObjectiveFn f,
                                  void *user,
                                  const double *x,
                                  size_t n,
                                  const struct KlSharpnessConfig *config,
                                  double *score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KNEELAB_H */
