#ifndef LIAO_H
#define LIAO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes; `Validation` and `Numeric` mirror the CLI exit codes 2 and 3.
typedef enum LiaoStatus {
  LIAO_STATUS_OK = 0,
  LIAO_STATUS_NULL_POINTER = 1,
  LIAO_STATUS_VALIDATION = 2,
  LIAO_STATUS_NUMERIC = 3,
  LIAO_STATUS_IO = 4,
  // A check inside the run failed; reports were still written.
  LIAO_STATUS_CHECKS_FAILED = 5,
  LIAO_STATUS_PANIC = 6,
} LiaoStatus;

typedef enum LiaoCommand {
  LIAO_COMMAND_CERTIFY = 0,
  LIAO_COMMAND_EXPONENTS = 1,
  LIAO_COMMAND_DELTA = 2,
  LIAO_COMMAND_CONJUGATE = 3,
} LiaoCommand;

// Opaque vector field.
typedef struct LiaoField LiaoField;

// Opaque validated scenario.
typedef struct LiaoScenario LiaoScenario;

// Certificate summary for one sample orbit.
typedef struct LiaoCertificate {
  bool pass;
  double eta_hat;
  double d_hat;
  // Set only when `pass`; otherwise NaN.
  double eta_a;
  // Set only when `pass`; otherwise NaN.
  double xi_a;
  double tail_bound;
} LiaoCertificate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into the library from the same thread.
const char *liao_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *liao_version(void);

// Parses a field from `dimension` component expressions in `x, y, z` or `x_1..x_n`.
//
// # Safety
// `components` must point to `dimension` valid C strings and `out` must be writable.
enum LiaoStatus liao_field_new(const char *const *components,
                               size_t dimension,
                               struct LiaoField **out);

// # Safety
// `field` must come from [`liao_field_new`] and not be used afterwards; NULL is ignored.
void liao_field_free(struct LiaoField *field);

// Dimension of the field, 0 for NULL.
//
// # Safety
// `field` must be NULL or a live handle.
size_t liao_field_dimension(const struct LiaoField *field);

// Writes `S(w)` into `out`; both arrays hold the field dimension.
//
// # Safety
// `w` and `out` must point to `liao_field_dimension(field)` doubles.
enum LiaoStatus liao_field_eval(const struct LiaoField *field, const double *w, double *out);

// Certifies hyperbolicity along the orbit of `w` over `[−horizon, horizon]`
// with the default window lengths 1, 2, 5 and 10.
//
// # Safety
// `w` must point to the field dimension doubles and `out` must be writable.
enum LiaoStatus liao_certify_orbit(const struct LiaoField *field,
                                   const double *w,
                                   size_t p_minus,
                                   double h,
                                   double horizon,
                                   double window_t,
                                   struct LiaoCertificate *out);

// `ε = η_f ξ (1 + 2ηξ)^p` and the homeomorphism threshold `1/(ξ (1 + ηξ)^p)`.
//
// # Safety
// `epsilon` and `threshold` must be writable.
enum LiaoStatus liao_epsilon_bound(double eta_a,
                                   double xi_a,
                                   double eta_f,
                                   size_t p,
                                   double *epsilon,
                                   double *threshold);

// Loads and validates a scenario file.
//
// # Safety
// `path` must be a valid C string and `out` writable.
enum LiaoStatus liao_scenario_load(const char *path, struct LiaoScenario **out);

// # Safety
// `scenario` must come from [`liao_scenario_load`] and not be used afterwards; NULL is ignored.
void liao_scenario_free(struct LiaoScenario *scenario);

// Writes the scenario hash (64 hex digits plus NUL) into `buf`.
//
// # Safety
// `buf` must hold `len` bytes.
enum LiaoStatus liao_scenario_hash(const struct LiaoScenario *scenario, char *buf, size_t len);

// Runs `command` and writes its reports into `out_dir`, as the CLI does.
// Returns [`LiaoStatus::ChecksFailed`] when the reports were written but a
// check in them failed.
//
// # Safety
// `scenario` must be a live handle and `out_dir` a valid C string.
enum LiaoStatus liao_scenario_run(const struct LiaoScenario *scenario,
                                  enum LiaoCommand command,
                                  const char *out_dir,
                                  uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIAO_H */
