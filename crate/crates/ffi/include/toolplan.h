#ifndef TOOLPLAN_H
#define TOOLPLAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TpStatus {
  TP_STATUS_OK = 0,
  TP_STATUS_NULL_ARGUMENT = 1,
  TP_STATUS_INVALID_UTF8 = 2,
  TP_STATUS_INVALID_ARGUMENT = 3,
  TP_STATUS_IO = 4,
  TP_STATUS_PARSE = 5,
  TP_STATUS_UNKNOWN_TOOL = 6,
  TP_STATUS_EMPTY_INDEX = 7,
  TP_STATUS_INTERNAL = 99,
} TpStatus;

typedef enum TpBackend {
  TP_BACKEND_HASH = 0,
  TP_BACKEND_BM25 = 1,
} TpBackend;

// Loaded tool corpus.
typedef struct TpCorpus TpCorpus;

// Searchable index bound to the corpus it was built from.
typedef struct TpIndex TpIndex;

typedef struct TpScores {
  double ndcg;
  double recall;
  uint8_t completeness;
} TpScores;

typedef struct TpRewardWeights {
  double ndcg;
  double recall;
  double format;
  double stop;
  double plan;
} TpRewardWeights;

typedef struct TpRewardComponents {
  double delta_ndcg;
  double delta_recall;
  double format_fraction;
  uint8_t stop_flag;
  double plan_similarity;
} TpRewardComponents;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *tp_last_error(void);

const char *tp_version(void);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void tp_string_free(char *s);

// Loads a JSONL corpus from `path`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TpStatus tp_corpus_load(const char *path, struct TpCorpus **out);

// Parses a corpus from JSONL text held in memory.
//
// # Safety
// `jsonl` must be a NUL-terminated string; `out` must be writable.
enum TpStatus tp_corpus_from_jsonl(const char *jsonl, struct TpCorpus **out);

// # Safety
// `corpus` must be null or a live handle.
size_t tp_corpus_len(const struct TpCorpus *corpus);

// # Safety
// `corpus` must be null or a handle not yet freed.
void tp_corpus_free(struct TpCorpus *corpus);

// Builds an index over `corpus`. `dim` and `seed` apply to the hash backend
// only. The index keeps its own reference to the corpus.
//
// # Safety
// `corpus` must be a live handle; `out` must be writable.
enum TpStatus tp_index_build(const struct TpCorpus *corpus,
                             enum TpBackend backend,
                             size_t dim,
                             uint64_t seed,
                             struct TpIndex **out);

// Top-`k` search. Writes a JSON object `{"query_text", "hits": [{"tool_id",
// "score", "rank"}]}` to `out_json`.
//
// # Safety
// `index` must be a live handle, `query` a NUL-terminated string and
// `out_json` writable.
enum TpStatus tp_index_search(const struct TpIndex *index,
                              const char *query,
                              size_t k,
                              char **out_json);

// # Safety
// `index` must be null or a handle not yet freed.
void tp_index_free(struct TpIndex *index);

// Fuses a JSON array of runs as produced by [`tp_index_search`]. Each run may
// carry an optional `"view"` string used by `multi_view`. `method` is one of
// `peak_rank`, `rrf`, `multi_view`; `rrf_c <= 0` selects the default.
//
// # Safety
// `index` must be a live handle; string arguments NUL-terminated;
// `out_json` writable.
enum TpStatus tp_fuse(const struct TpIndex *index,
                      const char *runs_json,
                      const char *method,
                      double rrf_c,
                      char **out_json);

// Scores a ranked list of tool ids (JSON array of strings) against a JSON
// array of target ids.
//
// # Safety
// String arguments must be NUL-terminated; `out` writable.
enum TpStatus tp_metrics(const char *ranked_json,
                         const char *targets_json,
                         size_t k,
                         struct TpScores *out);

struct TpRewardWeights tp_reward_default_weights(void);

// Weighted reward total. A null `weights` uses the defaults.
//
// # Safety
// `components` must be readable, `weights` null or readable, `out` writable.
enum TpStatus tp_reward_total(const struct TpRewardComponents *components,
                              const struct TpRewardWeights *weights,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOOLPLAN_H */
