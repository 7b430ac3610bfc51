#ifndef CIL_H
#define CIL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of every fallible call.
 */
typedef enum CilStatus {
  /**
   * The call succeeded.
   */
  CilOk = 0,
  /**
   * Invalid configuration.
   */
  CilConfigError = 1,
  /**
   * Unreadable or inconsistent data, including I/O failures.
   */
  CilDataError = 2,
  /**
   * Numerical failure, e.g. a non-finite training loss.
   */
  CilNumericalError = 3,
  /**
   * A required pointer was null or an argument was malformed.
   */
  CilInvalidArgument = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  CilPanic = 5,
} CilStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct CilModel CilModel;

/**
 * One classified instance.
 */
typedef struct CilPrediction {
  /**
   * External label of the winning class.
   */
  uintptr_t class_id;
  /**
   * Classifier column of the winning class.
   */
  uintptr_t column;
  /**
   * 1-based id of the task adapter the answer was read from; 0 means the
   * universal adapter.
   */
  uintptr_t selected_task;
} CilPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, empty when the
 * last call succeeded. The pointer is invalidated by the next toolkit call
 * on the same thread; copy the string before calling anything else.
 */
const char *cil_last_error(void);

/**
 * Loads a model checkpoint written by the `cil` CLI or
 * [`cil_run_experiment`] and stores the handle in `out`.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * storage for one pointer; both must stay valid for the whole call.
 */
enum CilStatus cil_model_load(const char *path, struct CilModel **out);

/**
 * Releases a handle obtained from [`cil_model_load`]. A null handle is a
 * no-op.
 *
 * # Safety
 * `model` must be a pointer returned by [`cil_model_load`] that has not
 * been freed yet, or null.
 */
void cil_model_free(struct CilModel *model);

/**
 * Number of tasks the model has been trained on.
 *
 * # Safety
 * `model` must be a live handle from [`cil_model_load`]; `out` must point
 * to writable storage for one `size_t`.
 */
enum CilStatus cil_model_num_tasks(const struct CilModel *model, uintptr_t *out);

/**
 * Number of classes the model can currently distinguish.
 *
 * # Safety
 * `model` must be a live handle from [`cil_model_load`]; `out` must point
 * to writable storage for one `size_t`.
 */
enum CilStatus cil_model_seen_classes(const struct CilModel *model, uintptr_t *out);

/**
 * Length of the flattened token buffer one instance occupies, i.e.
 * sequence length times token dimension.
 *
 * # Safety
 * `model` must be a live handle from [`cil_model_load`]; `out` must point
 * to writable storage for one `size_t`.
 */
enum CilStatus cil_model_input_len(const struct CilModel *model, uintptr_t *out);

/**
 * Classifies one instance. `strategy` is one of `"ensemble"`,
 * `"entropy_only"`, `"universal_only"`, `"max_logit"`; `tokens` holds the
 * row-major token matrix, `tokens_len` values as reported by
 * [`cil_model_input_len`].
 *
 * # Safety
 * `model` must be a live handle from [`cil_model_load`]; `strategy` must be
 * NUL-terminated; `tokens` must point to `tokens_len` readable doubles;
 * `out` must point to writable storage for one [`CilPrediction`].
 */
enum CilStatus cil_model_predict(const struct CilModel *model,
                                 const char *strategy,
                                 const double *tokens,
                                 uintptr_t tokens_len,
                                 struct CilPrediction *out);

/**
 * Runs the full incremental experiment and writes `report.json`,
 * `timing.txt`, `curves.svg`, and `model.ckpt` into `out_dir`. A null
 * `config_path` runs the built-in defaults; a null `backbone_path`
 * pretrains the backbone from scratch instead of reusing a checkpoint.
 *
 * # Safety
 * Non-null pointers must be NUL-terminated strings valid for the whole
 * call.
 */
enum CilStatus cil_run_experiment(const char *config_path,
                                  const char *backbone_path,
                                  const char *out_dir);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CIL_H */
