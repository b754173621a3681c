#ifndef FEDCROWD_H
#define FEDCROWD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FcStatus {
  FC_STATUS_OK = 0,
  FC_STATUS_NULL_POINTER = 1,
  FC_STATUS_INVALID_UTF8 = 2,
  FC_STATUS_INVALID_ARGUMENT = 3,
  FC_STATUS_CONFIG = 4,
  FC_STATUS_IO = 5,
  FC_STATUS_MODEL = 6,
  FC_STATUS_CONSTRAINT = 7,
  FC_STATUS_BUFFER_TOO_SMALL = 8,
  FC_STATUS_PANIC = 9,
  FC_STATUS_INTERNAL = 10,
} FcStatus;

typedef enum FcPolicy {
  FC_POLICY_FDRL_PPO = 0,
  FC_POLICY_IPPO = 1,
  FC_POLICY_MOTP = 2,
  FC_POLICY_RTPS = 3,
  FC_POLICY_OTA = 4,
} FcPolicy;

/**
 * Parsed experiment configuration.
 */
typedef struct FcConfig FcConfig;

/**
 * Actor and critic parameters of one agent.
 */
typedef struct FcModel FcModel;

/**
 * Results of a scenario run.
 */
typedef struct FcRun FcRun;

/**
 * Mean with its 5%/95% bootstrap interval over `n` realizations.
 */
typedef struct FcEstimate {
  double mean;
  double ci_low;
  double ci_high;
  size_t n;
} FcEstimate;

/**
 * One (sweep value, policy) point of a scenario run.
 */
typedef struct FcPointSummary {
  bool has_axis;
  double axis_value;
  enum FcPolicy policy;
  size_t realizations;
  struct FcEstimate weighted_completed;
  struct FcEstimate collision_ratio;
  struct FcEstimate energy_per_completed;
  double per_type_cv;
} FcPointSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fc_last_error_message(void);

void fc_clear_error(void);

/**
 * Library version as a static string.
 */
const char *fc_version(void);

/**
 * Task difficulty for a result of `result_size` bits due within
 * `deadline` seconds of a `step_duration`-second step.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum FcStatus fc_task_difficulty(double result_size,
                                 double deadline,
                                 double max_result_size,
                                 double step_duration,
                                 double size_weight,
                                 double deadline_weight,
                                 double *out);

/**
 * Upload time of `bits` over a Shannon-rate link (infinite for a zero rate).
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum FcStatus fc_transmission_time(double bits,
                                   double transmit_power,
                                   double channel_gain,
                                   double bandwidth,
                                   double noise_power,
                                   double *out);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum FcStatus fc_computing_time(double raw_size,
                                double complexity,
                                double compute_rate,
                                double *out);

/**
 * # Safety
 * `out` must be valid for writes.
 */
enum FcStatus fc_compute_energy(double raw_size,
                                double complexity,
                                double compute_rate,
                                double energy_coeff,
                                double *out);

/**
 * Battery level after spending and harvesting, clipped at `capacity`.
 * Spending more than `prev` fails with `FC_STATUS_MODEL`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum FcStatus fc_battery_update(double prev,
                                double spent,
                                double harvested,
                                double capacity,
                                double *out);

/**
 * Parses a flat `key = value` configuration.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum FcStatus fc_config_parse(const char *text, struct FcConfig **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum FcStatus fc_config_load(const char *path, struct FcConfig **out);

/**
 * Writes the full configuration in the flat format. With a NULL or short
 * buffer, returns `FC_STATUS_BUFFER_TOO_SMALL` and sets `needed`.
 *
 * # Safety
 * `cfg` must come from `fc_config_parse`/`fc_config_load`; `buf` must
 * hold `len` bytes; `needed` may be NULL.
 */
enum FcStatus fc_config_to_string(const struct FcConfig *cfg,
                                  char *buf,
                                  size_t len,
                                  size_t *needed);

/**
 * # Safety
 * `cfg` must be NULL or a live handle; it is invalid afterwards.
 */
void fc_config_free(struct FcConfig *cfg);

/**
 * Trains and validates the configured policies. `out_dir` may be NULL to
 * skip writing result files.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` NULL or a NUL-terminated string;
 * `out` valid for writes.
 */
enum FcStatus fc_run_scenario(const struct FcConfig *cfg, const char *out_dir, struct FcRun **out);

/**
 * # Safety
 * `run` must be a live handle; `count` valid for writes.
 */
enum FcStatus fc_run_point_count(const struct FcRun *run, size_t *count);

/**
 * # Safety
 * `run` must be a live handle; `out` valid for writes.
 */
enum FcStatus fc_run_point(const struct FcRun *run, size_t index, struct FcPointSummary *out);

/**
 * Whole result as JSON, owned by the handle (valid until `fc_run_free`).
 * Returns NULL for a NULL handle.
 *
 * # Safety
 * `run` must be NULL or a live handle.
 */
const char *fc_run_summary_json(const struct FcRun *run);

/**
 * # Safety
 * `run` must be NULL or a live handle; it is invalid afterwards.
 */
void fc_run_free(struct FcRun *run);

/**
 * Freshly initialized agent model for `tasks_per_step` task slots with the
 * default hyperparameters, seeded by `seed`.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum FcStatus fc_model_init(size_t tasks_per_step, uint64_t seed, struct FcModel **out);

/**
 * Reads a model from its binary encoding.
 *
 * # Safety
 * `bytes` must hold `len` readable bytes; `out` valid for writes.
 */
enum FcStatus fc_model_from_bytes(const uint8_t *bytes, size_t len, struct FcModel **out);

/**
 * Binary encoding of the model. With a NULL or short buffer, returns
 * `FC_STATUS_BUFFER_TOO_SMALL` and sets `needed`.
 *
 * # Safety
 * `model` must be a live handle; `buf` must hold `len` bytes; `needed`
 * may be NULL.
 */
enum FcStatus fc_model_to_bytes(const struct FcModel *model,
                                uint8_t *buf,
                                size_t len,
                                size_t *needed);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for writes.
 */
enum FcStatus fc_model_read(const char *path, struct FcModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum FcStatus fc_model_write(const struct FcModel *model, const char *path);

/**
 * Total number of actor and critic parameters.
 *
 * # Safety
 * `model` must be a live handle; `count` valid for writes.
 */
enum FcStatus fc_model_param_count(const struct FcModel *model, size_t *count);

/**
 * Weighted combination of `count` same-shaped models.
 *
 * # Safety
 * `models` must hold `count` live handles and `weights` `count` values;
 * `out` valid for writes.
 */
enum FcStatus fc_model_combine(const struct FcModel *const *models,
                               const double *weights,
                               size_t count,
                               struct FcModel **out);

/**
 * Raw actor outputs for one observation.
 *
 * # Safety
 * `model` must be a live handle; `input` must hold `input_len` values and
 * `output` `output_len` writable values.
 */
enum FcStatus fc_model_actor_forward(const struct FcModel *model,
                                     const double *input,
                                     size_t input_len,
                                     double *output,
                                     size_t output_len);

/**
 * # Safety
 * `model` must be NULL or a live handle; it is invalid afterwards.
 */
void fc_model_free(struct FcModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDCROWD_H */
