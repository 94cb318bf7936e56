#ifndef HSR_H
#define HSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HsrComplement {
  HSR_COMPLEMENT_KV_OFFLOAD = 0,
  HSR_COMPLEMENT_RECOMPUTE = 1,
  HSR_COMPLEMENT_NONE = 2,
} HsrComplement;

typedef enum HsrStatus {
  HSR_STATUS_OK = 0,
  HSR_STATUS_NULL_ARGUMENT = 1,
  HSR_STATUS_INVALID_ARGUMENT = 2,
  HSR_STATUS_IO = 3,
  HSR_STATUS_NOT_FOUND = 4,
  HSR_STATUS_MISMATCH = 5,
  HSR_STATUS_BUFFER_TOO_SMALL = 6,
  HSR_STATUS_INTERNAL = 7,
} HsrStatus;

typedef struct HsrKvCache HsrKvCache;

typedef struct HsrModel HsrModel;

typedef struct HsrStore HsrStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t hsr_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hsr_version(void);

/**
 * Model with the given shape and weight seed; RoPE and layer norms on,
 * fp32 persisted state.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HsrStatus hsr_model_new(size_t n_layers,
                             size_t d_hidden,
                             size_t n_heads,
                             size_t d_ffn,
                             size_t vocab_size,
                             size_t max_seq,
                             uint64_t seed,
                             struct HsrModel **out);

/**
 * Default desk-scale model.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HsrStatus hsr_model_new_desk(uint64_t seed, struct HsrModel **out);

/**
 * # Safety
 * `m` must be null or come from `hsr_model_new*` and not be freed twice.
 */
void hsr_model_free(struct HsrModel *m);

/**
 * Store striped over `n_devices` directories `dev<i>` below `root`.
 *
 * # Safety
 * `root` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HsrStatus hsr_store_open(const char *root, size_t n_devices, struct HsrStore **out);

/**
 * # Safety
 * `s` must be null or come from `hsr_store_open` and not be freed twice.
 */
void hsr_store_free(struct HsrStore *s);

/**
 * Prefill `tokens` and persist the states the plan asks for under `session`.
 *
 * # Safety
 * Handles must be live, `session` NUL-terminated, `tokens` `n_tokens` long.
 */
enum HsrStatus hsr_prefill_save(const struct HsrModel *model,
                                const struct HsrStore *store,
                                const char *session,
                                const uint32_t *tokens,
                                size_t n_tokens,
                                size_t plan_l_h,
                                size_t plan_l_o,
                                enum HsrComplement complement);

/**
 * Rebuild a session's KV cache following the plan it was stored with.
 * `out_seconds` (optional) receives the wall-clock restore time.
 *
 * # Safety
 * Handles must be live, `session` NUL-terminated, `out` valid.
 */
enum HsrStatus hsr_restore(const struct HsrModel *model,
                           const struct HsrStore *store,
                           const char *session,
                           struct HsrKvCache **out,
                           double *out_seconds);

/**
 * Prefill `tokens` straight into a cache, for comparison with a restore.
 *
 * # Safety
 * `model` must be live, `tokens` `n_tokens` long, `out` valid.
 */
enum HsrStatus hsr_prefill(const struct HsrModel *model,
                           const uint32_t *tokens,
                           size_t n_tokens,
                           struct HsrKvCache **out);

/**
 * Tokens held by the cache.
 *
 * # Safety
 * `kv` must be live; `out_len` valid.
 */
enum HsrStatus hsr_kv_len(const struct HsrKvCache *kv, size_t *out_len);

/**
 * Copy one layer's K and V (tokens × d_hidden, row-major) out. Each buffer
 * must hold `cap` floats; `BUFFER_TOO_SMALL` if that is short.
 *
 * # Safety
 * `kv` must be live; `k_out` and `v_out` must hold `cap` floats.
 */
enum HsrStatus hsr_kv_copy_layer(const struct HsrKvCache *kv,
                                 size_t layer,
                                 float *k_out,
                                 float *v_out,
                                 size_t cap);

/**
 * # Safety
 * `kv` must be null or a live cache handle.
 */
void hsr_kv_free(struct HsrKvCache *kv);

/**
 * Partition plan for per-layer stage times.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum HsrStatus hsr_plan(double io_h,
                        double io_kv,
                        double c_h,
                        double c_token,
                        size_t n_layers,
                        size_t *out_l_h,
                        size_t *out_l_o,
                        enum HsrComplement *out_complement);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HSR_H */
