#ifndef KVTIER_H
#define KVTIER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KvtLink {
  KVT_LINK_PCIE5 = 0,
  KVT_LINK_NVLINK_C2C = 1,
  KVT_LINK_NVME = 2,
} KvtLink;

typedef enum KvtStatus {
  KVT_STATUS_OK = 0,
  KVT_STATUS_NULL_POINTER = 1,
  KVT_STATUS_INVALID_ARGUMENT = 2,
  KVT_STATUS_CONFIG = 3,
  KVT_STATUS_TRACE = 4,
  KVT_STATUS_SIMULATION = 5,
  KVT_STATUS_PANIC = 6,
} KvtStatus;

typedef enum KvtTier {
  KVT_TIER_DEVICE = 0,
  KVT_TIER_HOST = 1,
  KVT_TIER_DISK = 2,
} KvtTier;

typedef struct KvtConfig KvtConfig;

typedef struct KvtReport KvtReport;

/**
 * A radix index with unbounded page pools at every tier.
 */
typedef struct KvtTree KvtTree;

/**
 * Headline numbers of a finished run.
 */
typedef struct KvtSummary {
  uint64_t requests;
  double ttft_mean;
  double ttft_p50;
  double ttft_p90;
  double output_throughput;
  double stall_fraction;
  double hit_rate;
  uint64_t compute_tokens;
  uint64_t deferrals;
  uint64_t bundle_hits;
} KvtSummary;

/**
 * Prefix match split by tier, in tokens.
 */
typedef struct KvtMatch {
  size_t matched;
  size_t device;
  size_t host;
  size_t disk;
} KvtMatch;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Free with
 * [`kvt_string_free`].
 */
char *kvt_last_error(void);

/**
 * # Safety
 * `s` is null or a string returned by this library, not yet freed.
 */
void kvt_string_free(char *s);

/**
 * Builds a configuration from named profiles, e.g. `"h200-pcie5"`,
 * `"gpu_assist"`, `"loogle"`.
 *
 * # Safety
 * String arguments are NUL-terminated; `out` is writable.
 */
enum KvtStatus kvt_config_from_profiles(const char *hardware,
                                        const char *backend,
                                        const char *workload,
                                        struct KvtConfig **out);

/**
 * Parses a TOML run configuration.
 *
 * # Safety
 * `toml` is NUL-terminated; `out` is writable.
 */
enum KvtStatus kvt_config_parse(const char *toml, struct KvtConfig **out);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum KvtStatus kvt_config_set_seed(struct KvtConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` is null or a handle not yet freed.
 */
void kvt_config_free(struct KvtConfig *cfg);

/**
 * Runs one simulation. With `trace_jsonl` null the workload is generated
 * from the configuration; otherwise it holds the trace file contents.
 *
 * # Safety
 * `cfg` is a live handle, `trace_jsonl` is null or NUL-terminated, `out`
 * is writable.
 */
enum KvtStatus kvt_simulate(const struct KvtConfig *cfg,
                            const char *trace_jsonl,
                            struct KvtReport **out);

/**
 * # Safety
 * `report` is a live handle and `out` is writable.
 */
enum KvtStatus kvt_report_summary(const struct KvtReport *report, struct KvtSummary *out);

/**
 * The full report as stable JSON, or null on failure. Free with
 * [`kvt_string_free`].
 *
 * # Safety
 * `report` is null or a live handle.
 */
char *kvt_report_json(const struct KvtReport *report);

/**
 * # Safety
 * `report` is null or a handle not yet freed.
 */
void kvt_report_free(struct KvtReport *report);

/**
 * Creates an empty prefix index with `page_size` tokens per page.
 *
 * # Safety
 * `out` is writable.
 */
enum KvtStatus kvt_tree_new(uint32_t page_size, struct KvtTree **out);

/**
 * Records `tokens` as cached at `tier`. Trailing tokens short of a full
 * page are ignored.
 *
 * # Safety
 * `tree` is a live handle; `tokens` points to `len` readable values.
 */
enum KvtStatus kvt_tree_insert(struct KvtTree *tree,
                               const uint32_t *tokens_ptr,
                               size_t len,
                               enum KvtTier tier);

/**
 * Longest cached prefix of `tokens`.
 *
 * # Safety
 * `tree` is a live handle; `tokens` points to `len` readable values;
 * `out` is writable.
 */
enum KvtStatus kvt_tree_match(struct KvtTree *tree,
                              const uint32_t *tokens_ptr,
                              size_t len,
                              struct KvtMatch *out);

/**
 * # Safety
 * `tree` is null or a handle not yet freed.
 */
void kvt_tree_free(struct KvtTree *tree);

/**
 * Sustained bytes per second of DMA copies with the given per-operation
 * latency and queue depth.
 *
 * # Safety
 * `out` is writable.
 */
enum KvtStatus kvt_throughput_dma(double per_op_latency_s,
                                  uint32_t max_concurrency,
                                  enum KvtLink link,
                                  uint64_t chunk_size,
                                  double *out);

/**
 * Sustained bytes per second of GPU copy kernels on `blocks` blocks.
 *
 * # Safety
 * `out` is writable.
 */
enum KvtStatus kvt_throughput_gpu_assist(uint32_t blocks,
                                         double per_block_bandwidth,
                                         enum KvtLink link,
                                         uint64_t chunk_size,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KVTIER_H */
