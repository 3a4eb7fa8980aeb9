#ifndef PADNET_H
#define PADNET_H

/* Generated from the padnet-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call; `Ok` is zero.
 */
typedef enum PadnetStatus {
  PadnetStatus_Ok = 0,
  PadnetStatus_NullPointer = 1,
  PadnetStatus_InvalidUtf8 = 2,
  PadnetStatus_ShapeMismatch = 3,
  PadnetStatus_InvalidArgument = 4,
  PadnetStatus_NonFiniteGradient = 5,
  PadnetStatus_InvalidConfig = 6,
  PadnetStatus_BadFormat = 7,
  PadnetStatus_DataExhausted = 8,
  PadnetStatus_Diverged = 9,
  PadnetStatus_AlreadyCompacted = 10,
  PadnetStatus_Io = 11,
  PadnetStatus_Json = 12,
  PadnetStatus_Panic = 13,
} PadnetStatus;

/**
 * Opaque handle to a loaded model and its embedded experiment config.
 */
typedef struct PadnetModel PadnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *padnet_version(void);

/**
 * Message for the most recent failure on this thread, or null after a
 * success. Valid until the next padnet call on the same thread.
 */
const char *padnet_last_error(void);

/**
 * Train from a JSON experiment config, writing artifacts under `out_dir`.
 * On success, when `summary_json` is non-null it receives a heap-allocated
 * JSON summary; release it with [`padnet_string_free`].
 *
 * # Safety
 * `config_json` and `out_dir` must be valid NUL-terminated strings;
 * `summary_json` must be null or a valid pointer.
 */
enum PadnetStatus padnet_train(const char *config_json, const char *out_dir, char **summary_json);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer obtained from a padnet function.
 */
void padnet_string_free(char *s);

/**
 * Load a checkpoint written by training into an opaque handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer.
 */
enum PadnetStatus padnet_model_open(const char *path, struct PadnetModel **out);

/**
 * Release a handle returned by [`padnet_model_open`]. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a pointer obtained from [`padnet_model_open`]
 * that has not been closed yet.
 */
void padnet_model_close(struct PadnetModel *model);

/**
 * Number of stored parameter scalars (after compaction this is the reduced
 * count).
 *
 * # Safety
 * `model` must be a live handle; `count` must be a valid pointer.
 */
enum PadnetStatus padnet_model_param_count(const struct PadnetModel *model, uint64_t *count);

/**
 * Whether any layer's storage has been compacted.
 *
 * # Safety
 * `model` must be a live handle; `compacted` must be a valid pointer.
 */
enum PadnetStatus padnet_model_is_compacted(const struct PadnetModel *model, bool *compacted);

/**
 * Evaluate the model on its config's test split, materializing synthetic
 * data under `workdir` when the config calls for it.
 *
 * # Safety
 * `model` must be a live handle; `workdir` must be a valid NUL-terminated
 * string; `accuracy` and `mean_loss` must be valid pointers.
 */
enum PadnetStatus padnet_model_evaluate(const struct PadnetModel *model,
                                        const char *workdir,
                                        double *accuracy,
                                        double *mean_loss);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PADNET_H */
