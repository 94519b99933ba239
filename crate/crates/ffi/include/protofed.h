#ifndef PROTOFED_H
#define PROTOFED_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_SHAPE_MISMATCH = 3,
  PF_STATUS_IO = 4,
  PF_STATUS_PARSE = 5,
  PF_STATUS_CONFIG = 6,
  PF_STATUS_NON_FINITE = 7,
  PF_STATUS_SERIALIZATION = 8,
  /**
   * Caller buffer too small; the required size was written.
   */
  PF_STATUS_BUFFER_TOO_SMALL = 9,
  PF_STATUS_RUNTIME = 10,
  PF_STATUS_PANIC = 11,
} PfStatus;

/**
 * Opaque run configuration.
 */
typedef struct PfConfig PfConfig;

/**
 * Opaque prototype memory.
 */
typedef struct PfMemory PfMemory;

/**
 * Opaque simulation result.
 */
typedef struct PfSimulation PfSimulation;

/**
 * Test metrics and traffic of one domain.
 */
typedef struct {
  size_t horizon;
  double mse;
  double mae;
  size_t upload_bytes_per_round;
  size_t download_bytes_per_round;
  size_t total_bytes;
  size_t full_model_bytes;
  double payload_ratio;
} PfDomainSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *pf_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *pf_version(void);

/**
 * Serialized size in bytes of an `m x d` memory.
 */
size_t pf_wire_size(size_t m, size_t d);

/**
 * Seeded random memory with `m` prototypes of dimension `d`.
 *
 * # Safety
 * `out` must be writable.
 */
PfStatus pf_memory_new(size_t m, size_t d, uint64_t seed, PfMemory **out);

/**
 * Memory holding a copy of the row-major `m x d` array `rows`.
 *
 * # Safety
 * `rows` must hold `m * d` doubles and `out` must be writable.
 */
PfStatus pf_memory_from_rows(const double *rows, size_t m, size_t d, PfMemory **out);

/**
 * Releases a memory. Null is ignored.
 *
 * # Safety
 * `memory` must be null or a handle not yet freed.
 */
void pf_memory_free(PfMemory *memory);

/**
 * Writes the memory's shape.
 *
 * # Safety
 * `memory` must be a live handle; `m` and `d` must be writable.
 */
PfStatus pf_memory_shape(const PfMemory *memory, size_t *m, size_t *d);

/**
 * Copies row `k` into `out` (`d` doubles).
 *
 * # Safety
 * `memory` must be a live handle and `out` must hold `d` doubles.
 */
PfStatus pf_memory_row(const PfMemory *memory, size_t k, double *out, size_t d);

/**
 * Copies the usage counts into `out` (`m` values).
 *
 * # Safety
 * `memory` must be a live handle and `out` must hold `m` values.
 */
PfStatus pf_memory_usage(const PfMemory *memory, uint64_t *out, size_t m);

/**
 * Index of the prototype nearest to `query` (`d` doubles); ties go to the
 * lowest index.
 *
 * # Safety
 * `memory` must be a live handle, `query` must hold `d` doubles and `index`
 * must be writable.
 */
PfStatus pf_memory_retrieve(const PfMemory *memory, const double *query, size_t d, size_t *index);

/**
 * Quantizes `n` row-major queries, writing one index per row and, when
 * `record_usage` is set, adding the assignments to the usage counts.
 *
 * # Safety
 * `memory` must be a live handle, `queries` must hold `n * d` doubles and
 * `indices` `n` values.
 */
PfStatus pf_memory_quantize(PfMemory *memory,
                            const double *queries,
                            size_t n,
                            size_t d,
                            bool record_usage,
                            size_t *indices);

/**
 * Serializes vectors and usage counts (little-endian). Pass a null buffer
 * to query the size.
 *
 * # Safety
 * `memory` must be a live handle, `buf` null or `len` writable bytes, and
 * `written` writable.
 */
PfStatus pf_memory_serialize(const PfMemory *memory, uint8_t *buf, size_t len, size_t *written);

/**
 * Rebuilds an `m x d` memory from [`pf_memory_serialize`] output.
 *
 * # Safety
 * `bytes` must hold `len` bytes and `out` must be writable.
 */
PfStatus pf_memory_deserialize(const uint8_t *bytes,
                               size_t len,
                               size_t m,
                               size_t d,
                               PfMemory **out);

/**
 * Cosine similarity of two `d`-vectors; 0 when either is near zero.
 *
 * # Safety
 * `a` and `b` must hold `d` doubles and `out` must be writable.
 */
PfStatus pf_cosine_similarity(const double *a, const double *b, size_t d, double *out);

/**
 * Server update over `n` uploaded memories. Writes `n` new handles, one per
 * domain, into `out`; the caller frees each.
 *
 * # Safety
 * `uploads` must hold `n` live handles and `out` room for `n` handles.
 */
PfStatus pf_align_memories(const PfMemory *const *uploads,
                           size_t n,
                           double gamma,
                           double delta,
                           uint64_t seed,
                           uint64_t round,
                           PfMemory **out);

/**
 * Index-wise mean of `n` uploaded memories.
 *
 * # Safety
 * `uploads` must hold `n` live handles and `out` must be writable.
 */
PfStatus pf_aggregate_average(const PfMemory *const *uploads, size_t n, PfMemory **out);

/**
 * Loads a TOML run config; relative dataset paths resolve against its
 * directory.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
PfStatus pf_config_load(const char *path, PfConfig **out);

/**
 * Parses a TOML run config from a string.
 *
 * # Safety
 * `toml` must be a nul-terminated string and `out` writable.
 */
PfStatus pf_config_parse(const char *toml, PfConfig **out);

/**
 * Applies one `key=value` override. The config is unchanged on failure.
 *
 * # Safety
 * `config` must be a live handle and `assignment` a nul-terminated string.
 */
PfStatus pf_config_set(PfConfig *config, const char *assignment);

/**
 * Releases a config. Null is ignored.
 *
 * # Safety
 * `config` must be null or a handle not yet freed.
 */
void pf_config_free(PfConfig *config);

/**
 * Runs a full simulation. With `write_files` set, reports, summary and
 * checkpoints are written under the configured run directory.
 *
 * # Safety
 * `config` must be a live handle and `out` writable.
 */
PfStatus pf_simulation_run(const PfConfig *config, bool write_files, PfSimulation **out);

/**
 * Number of domains in a result; 0 for null.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
size_t pf_simulation_domain_count(const PfSimulation *sim);

/**
 * Round whose checkpoints were selected; 0 for null.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
size_t pf_simulation_best_round(const PfSimulation *sim);

/**
 * Number of rounds that ran; 0 for null.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
size_t pf_simulation_rounds(const PfSimulation *sim);

/**
 * Name of domain `i`, owned by the result; null when out of range.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
const char *pf_simulation_domain_name(const PfSimulation *sim, size_t i);

/**
 * Test metrics and traffic of domain `i`.
 *
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
PfStatus pf_simulation_domain_summary(const PfSimulation *sim, size_t i, PfDomainSummary *out);

/**
 * Summary CSV (header plus one row per domain). Pass a null buffer to
 * query the size.
 *
 * # Safety
 * `sim` must be a live handle, `buf` null or `len` writable bytes, and
 * `written` writable.
 */
PfStatus pf_simulation_summary_csv(const PfSimulation *sim,
                                   uint8_t *buf,
                                   size_t len,
                                   size_t *written);

/**
 * Releases a result. Null is ignored.
 *
 * # Safety
 * `sim` must be null or a handle not yet freed.
 */
void pf_simulation_free(PfSimulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOFED_H */
