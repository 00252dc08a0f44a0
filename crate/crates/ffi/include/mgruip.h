#ifndef MGRUIP_H
#define MGRUIP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
enum MgruipStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  Ok = 0,
  NullArgument = 1,
  InvalidArgument = 2,
  IoError = 3,
  ValidationError = 4,
  NumericError = 5,
  ContractError = 6,
  BufferTooSmall = 7,
};
#ifndef __cplusplus
typedef int32_t MgruipStatus;
#endif // __cplusplus

/**
 * Loaded model: topology plus parameters, shareable across streams.
 */
typedef struct MgruipModel MgruipModel;

/**
 * One open stream; single-threaded, independent of other streams.
 */
typedef struct MgruipStream MgruipStream;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mgruip_last_error_message(void);

/**
 * ABI version of this header/library pair.
 */
uint32_t mgruip_abi_version(void);

/**
 * Loads a model file written by the `mgruip train` CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
MgruipStatus mgruip_model_load(const char *path, struct MgruipModel **out);

/**
 * Frees a model. Streams opened from it keep their own reference and stay
 * valid.
 *
 * # Safety
 * `model` must be null or a pointer from `mgruip_model_load`, freed once.
 */
void mgruip_model_free(struct MgruipModel *model);

/**
 * # Safety
 * `model` must come from `mgruip_model_load`; `out` must be valid.
 */
MgruipStatus mgruip_model_input_dim(const struct MgruipModel *model, uintptr_t *out);

/**
 * # Safety
 * `model` must come from `mgruip_model_load`; `out` must be valid.
 */
MgruipStatus mgruip_model_output_dim(const struct MgruipModel *model, uintptr_t *out);

/**
 * Total future reach per output in base frames.
 *
 * # Safety
 * `model` must come from `mgruip_model_load`; `out` must be valid.
 */
MgruipStatus mgruip_model_lookahead_frames(const struct MgruipModel *model, uintptr_t *out);

/**
 * Model latency in milliseconds: lookahead plus output delay.
 *
 * # Safety
 * `model` must come from `mgruip_model_load`; `out` must be valid.
 */
MgruipStatus mgruip_model_latency_ms(const struct MgruipModel *model, double *out);

/**
 * Trainable parameter count; `bias_free` != 0 selects the recurrent+context
 * weight-only total.
 *
 * # Safety
 * `model` must come from `mgruip_model_load`; `out` must be valid.
 */
MgruipStatus mgruip_model_param_count(const struct MgruipModel *model,
                                      int32_t bias_free,
                                      uint64_t *out);

/**
 * Opens an independent stream over the model's parameters.
 *
 * # Safety
 * `model` must come from `mgruip_model_load`; `out` must be valid.
 */
MgruipStatus mgruip_stream_open(const struct MgruipModel *model, struct MgruipStream **out);

/**
 * # Safety
 * `stream` must be null or a pointer from `mgruip_stream_open`, freed once.
 */
void mgruip_stream_free(struct MgruipStream *stream);

/**
 * Pushes one frame of `len` == input_dim values. Completed outputs queue up
 * internally; drain them with `mgruip_stream_pop_output`.
 *
 * # Safety
 * `stream` must come from `mgruip_stream_open`; `frame` must point to `len`
 * readable floats.
 */
MgruipStatus mgruip_stream_push(struct MgruipStream *stream, const float *frame, uintptr_t len);

/**
 * Ends the stream, zero-padding the missing future; remaining outputs queue
 * up for `mgruip_stream_pop_output`.
 *
 * # Safety
 * `stream` must come from `mgruip_stream_open`.
 */
MgruipStatus mgruip_stream_flush(struct MgruipStream *stream);

/**
 * Number of completed outputs waiting to be popped.
 *
 * # Safety
 * `stream` must come from `mgruip_stream_open`.
 */
uintptr_t mgruip_stream_pending_outputs(const struct MgruipStream *stream);

/**
 * Pops the oldest completed output into `out` (capacity >= output_dim).
 * Returns BufferTooSmall without consuming when the capacity is short, and
 * ContractError when nothing is pending.
 *
 * # Safety
 * `stream` must come from `mgruip_stream_open`; `out` must point to
 * `capacity` writable floats.
 */
MgruipStatus mgruip_stream_pop_output(struct MgruipStream *stream, float *out, uintptr_t capacity);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MGRUIP_H */
