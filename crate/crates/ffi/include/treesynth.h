#ifndef TREESYNTH_H
#define TREESYNTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes for every fallible call.
typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_ARGUMENT = 1,
  TS_STATUS_INVALID_UTF8 = 2,
  TS_STATUS_IO = 3,
  TS_STATUS_PARSE = 4,
  TS_STATUS_CONFIG = 5,
  TS_STATUS_PROVIDER = 6,
  TS_STATUS_INVALID = 7,
  TS_STATUS_FINGERPRINT_MISMATCH = 8,
  TS_STATUS_INCOMPLETE = 9,
  TS_STATUS_OUT_OF_RANGE = 10,
  TS_STATUS_PANIC = 11,
} TsStatus;

// A loaded dataset.
typedef struct TsDataset TsDataset;

// An open run directory with its provider.
typedef struct TsRun TsRun;

// A loaded partition tree.
typedef struct TsTree TsTree;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer is
// valid until the next failing call on the same thread.
const char *ts_last_error(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void ts_string_free(char *s);

// Library version as a static string.
const char *ts_version(void);

// ROUGE-L F1 between two texts.
//
// # Safety
// `a` and `b` must be NUL-terminated strings; `out` must be writable.
enum TsStatus ts_rouge_l(const char *a, const char *b, double *out);

// Loads a tree from its JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TsStatus ts_tree_load(const char *path, struct TsTree **out);

// # Safety
// `tree` must come from [`ts_tree_load`] or be NULL.
void ts_tree_free(struct TsTree *tree);

// Number of nodes, or 0 for NULL.
//
// # Safety
// `tree` must be a live handle or NULL.
size_t ts_tree_node_count(const struct TsTree *tree);

// # Safety
// `tree` must be a live handle or NULL.
bool ts_tree_is_complete(const struct TsTree *tree);

// Number of leaves; fails with `TS_STATUS_INCOMPLETE` on an unfinished tree.
//
// # Safety
// `tree` must be a live handle; `out` must be writable.
enum TsStatus ts_tree_leaf_count(const struct TsTree *tree, size_t *out);

// Composed subspace description of the `index`-th leaf (depth-first order).
//
// # Safety
// `tree` must be a live handle; `out` must be writable.
enum TsStatus ts_tree_leaf_description(const struct TsTree *tree, size_t index, char **out);

// SHA-256 of the tree's canonical JSON, hex encoded. NULL for NULL.
//
// # Safety
// `tree` must be a live handle or NULL.
char *ts_tree_fingerprint(const struct TsTree *tree);

// Canonical JSON of the tree. NULL for NULL.
//
// # Safety
// `tree` must be a live handle or NULL.
char *ts_tree_to_json(const struct TsTree *tree);

// Loads a JSONL dataset, verifying its sidecar manifest when present.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TsStatus ts_dataset_load(const char *path, struct TsDataset **out);

// # Safety
// `dataset` must come from this library or be NULL.
void ts_dataset_free(struct TsDataset *dataset);

// Number of records, or 0 for NULL.
//
// # Safety
// `dataset` must be a live handle or NULL.
size_t ts_dataset_len(const struct TsDataset *dataset);

// Instruction text of record `index`.
//
// # Safety
// `dataset` must be a live handle; `out` must be writable.
enum TsStatus ts_dataset_instruction(const struct TsDataset *dataset, size_t index, char **out);

// Writes the dataset and its sidecar manifest.
//
// # Safety
// `dataset` must be a live handle; `path` a NUL-terminated string.
enum TsStatus ts_dataset_write(const struct TsDataset *dataset, const char *path);

// Near-duplicate filter. Produces a new handle with the kept records and
// optionally reports how many were removed.
//
// # Safety
// `dataset` must be a live handle; `out` must be writable; `removed` may be NULL.
enum TsStatus ts_dataset_dedup(const struct TsDataset *dataset,
                               double threshold,
                               struct TsDataset **out,
                               size_t *removed);

// Opens a run from a TOML config. `run_dir` may be NULL to use the
// location derived from the config.
//
// # Safety
// `config_path` must be a NUL-terminated string; `run_dir` one or NULL;
// `out` must be writable.
enum TsStatus ts_run_open(const char *config_path, const char *run_dir, struct TsRun **out);

// # Safety
// `run` must come from [`ts_run_open`] or be NULL.
void ts_run_free(struct TsRun *run);

// Builds or resumes the tree. `leaves` receives the leaf count (may be NULL).
//
// # Safety
// `run` must be a live handle.
enum TsStatus ts_run_partition(struct TsRun *run, size_t *leaves);

// Synthesizes records for every leaf; `per_leaf` 0 uses the config value.
//
// # Safety
// `run` must be a live handle; `records` may be NULL.
enum TsStatus ts_run_synthesize(struct TsRun *run, size_t per_leaf, size_t *records);

// Answers records that lack an answer.
//
// # Safety
// `run` must be a live handle; `failures` may be NULL.
enum TsStatus ts_run_answer(struct TsRun *run, size_t *failures);

// Deduplicates the run's dataset; a negative threshold uses the config value.
//
// # Safety
// `run` must be a live handle; `kept` may be NULL.
enum TsStatus ts_run_dedup(struct TsRun *run, double threshold, size_t *kept);

// Diversity score (mean pairwise cosine) of the run's latest dataset.
//
// # Safety
// `run` must be a live handle; `score` must be writable.
enum TsStatus ts_run_diversity(struct TsRun *run, double *score);

// Temperature-sampling baseline. `count` 0 matches the synthesized dataset;
// a negative `temperature` uses the config value.
//
// # Safety
// `run` must be a live handle; `records` may be NULL.
enum TsStatus ts_run_baseline(struct TsRun *run, size_t count, double temperature, size_t *records);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TREESYNTH_H */
