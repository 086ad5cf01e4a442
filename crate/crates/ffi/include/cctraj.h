#ifndef CCTRAJ_H
#define CCTRAJ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CctStatus {
  CCT_STATUS_OK = 0,
  CCT_STATUS_INVALID_ARGUMENT = 1,
  CCT_STATUS_INSUFFICIENT_CALIBRATION = 2,
  CCT_STATUS_INFEASIBLE = 3,
  CCT_STATUS_NUMERICAL_FAILURE = 4,
  CCT_STATUS_CONFIG = 5,
  CCT_STATUS_IO = 6,
  CCT_STATUS_PANIC = 7,
} CctStatus;

// Loaded experiment configuration.
typedef struct CctExperiment CctExperiment;

// Nominal trajectory with its solver header.
typedef struct CctPlan CctPlan;

// Monte Carlo audit summary. `min_coverage` and `coverage_floor` are NaN when
// no coverage audit ran.
typedef struct CctSummary {
  size_t runs;
  size_t diverged;
  double max_failure;
  size_t worst_step;
  double terminal_failure;
  double min_coverage;
  double coverage_floor;
} CctSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or NULL. Valid until the
// next call into this library from the same thread.
const char *cct_last_error(void);

// Loads a TOML config. `output_dir` may be NULL to keep the configured one.
//
// # Safety
// `config_path` must be a NUL-terminated string, `output_dir` NULL or one, and
// `out` a valid pointer.
enum CctStatus cct_experiment_load(const char *config_path,
                                   const char *output_dir,
                                   struct CctExperiment **out);

// # Safety
// `e` must be NULL or a handle from [`cct_experiment_load`] not yet freed.
void cct_experiment_free(struct CctExperiment *e);

// Calibrates and writes the artifact to the output directory. `eta` may be NULL.
//
// # Safety
// `e` must be a live handle and `eta` NULL or valid.
enum CctStatus cct_calibrate(const struct CctExperiment *e, double *eta);

// Plans from the calibration in `calibration_dir` (NULL: the output directory)
// and writes the plan file. A plan whose solver status is unusable is reported
// as `Infeasible` and no handle is returned.
//
// # Safety
// `e` must be a live handle, `calibration_dir` NULL or a NUL-terminated
// string, and `out` valid.
enum CctStatus cct_plan(const struct CctExperiment *e,
                        const char *calibration_dir,
                        struct CctPlan **out);

// Reads the plan file from directory `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` valid.
enum CctStatus cct_plan_read(const char *dir, struct CctPlan **out);

// # Safety
// `p` must be NULL or a live plan handle.
void cct_plan_free(struct CctPlan *p);

// Horizon `N`, state and control dimensions.
//
// # Safety
// `p` must be a live plan handle; each output pointer NULL or valid.
enum CctStatus cct_plan_dims(const struct CctPlan *p, size_t *horizon, size_t *n_x, size_t *n_u);

// Objective value of the plan.
//
// # Safety
// `p` must be a live plan handle and `objective` valid.
enum CctStatus cct_plan_objective(const struct CctPlan *p, double *objective);

// Copies the `(N+1)·n_x` states row-major into `buf` of length `len`.
//
// # Safety
// `p` must be a live plan handle and `buf` valid for `len` writes.
enum CctStatus cct_plan_states(const struct CctPlan *p, double *buf, size_t len);

// Copies the `N·n_u` controls row-major into `buf` of length `len`.
//
// # Safety
// `p` must be a live plan handle and `buf` valid for `len` writes.
enum CctStatus cct_plan_controls(const struct CctPlan *p, double *buf, size_t len);

// Monte Carlo audit of the conformal plan in the output directory; writes the
// report next to it.
//
// # Safety
// `e` must be a live handle and `out` valid.
enum CctStatus cct_simulate(const struct CctExperiment *e, struct CctSummary *out);

// Gaussian-linearization comparison: plans, evaluates and writes under
// `<output_dir>/baseline`.
//
// # Safety
// `e` must be a live handle and `out` valid.
enum CctStatus cct_baseline(const struct CctExperiment *e, struct CctSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCTRAJ_H */
