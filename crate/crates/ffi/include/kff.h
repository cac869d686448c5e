#ifndef KFF_H
#define KFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum KffStatus {
  KFF_STATUS_OK = 0,
  KFF_STATUS_NULL_POINTER = 1,
  KFF_STATUS_INVALID_ARGUMENT = 2,
  KFF_STATUS_DIMENSION = 3,
  KFF_STATUS_NON_FINITE = 4,
  KFF_STATUS_INSUFFICIENT_DATA = 5,
  KFF_STATUS_CONFIG = 6,
  KFF_STATUS_IO = 7,
  KFF_STATUS_PARSE = 8,
  KFF_STATUS_INTERNAL = 9,
  KFF_STATUS_PANIC = 10,
} KffStatus;

/**
 * Opaque adaptation engine.
 */
typedef struct KffEngine KffEngine;

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *kff_last_error(void);

/**
 * Creates an engine.
 *
 * `model_json` is a model snapshot; `source_samples` holds `source_count`
 * row-major samples of the model's input dimension; `hyperparams_json` may
 * be null for defaults.
 *
 * # Safety
 * Pointers must be valid for the documented lengths; `out` must be writable.
 */
enum KffStatus kff_engine_new(const char *model_json,
                              const double *source_samples,
                              size_t source_count,
                              const char *hyperparams_json,
                              uint64_t seed,
                              struct KffEngine **out);

/**
 * Releases an engine; null is ignored.
 *
 * # Safety
 * `engine` must come from [`kff_engine_new`] and not be used afterwards.
 */
void kff_engine_free(struct KffEngine *engine);

/**
 * Adapts to one batch of `batch_size × input_dim` row-major samples.
 * When `predictions` is non-null it receives `batch_size × num_classes`
 * class probabilities.
 *
 * # Safety
 * `samples` and, if given, `predictions` must be valid for those lengths.
 */
enum KffStatus kff_engine_step(struct KffEngine *engine,
                               const double *samples,
                               size_t batch_size,
                               size_t input_dim,
                               double *predictions);

/**
 * Writes the input dimension, class count, both pool sizes and the
 * learnable parameter count; any output pointer may be null.
 *
 * # Safety
 * Non-null pointers must be writable.
 */
enum KffStatus kff_engine_info(const struct KffEngine *engine,
                               size_t *input_dim,
                               size_t *num_classes,
                               size_t *domain_pool_size,
                               size_t *class_pool_size,
                               size_t *param_count);

/**
 * Serializes both pools as JSON into a new string owned by the caller.
 *
 * # Safety
 * `out` must be writable.
 */
enum KffStatus kff_engine_snapshot_json(const struct KffEngine *engine, char **out);

/**
 * Releases a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void kff_string_free(char *s);

/**
 * Runs the seeded gradient check and reports the largest relative error.
 * Returns `Ok` only if it is below `tolerance`.
 *
 * # Safety
 * `max_rel_error` must be writable or null.
 */
enum KffStatus kff_gradcheck(uint64_t seed,
                             size_t configs,
                             double step,
                             double tolerance,
                             double *max_rel_error);

#endif  /* KFF_H */
