#ifndef LINE_H
#define LINE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum LineStatus {
  LINE_STATUS_OK = 0,
  LINE_STATUS_NULL_POINTER = 1,
  LINE_STATUS_INVALID_UTF8 = 2,
  LINE_STATUS_INVALID_ARGUMENT = 3,
  LINE_STATUS_EMPTY = 4,
  LINE_STATUS_DEGENERATE_CONTROL = 5,
  LINE_STATUS_FAILED = 6,
  LINE_STATUS_PANIC = 7,
} LineStatus;

typedef enum LineOrigin {
  LINE_ORIGIN_PREDEFINED = 0,
  LINE_ORIGIN_GENERATED = 1,
  LINE_ORIGIN_SUMMARY = 2,
} LineOrigin;

typedef enum LineSimProposer {
  LINE_SIM_PROPOSER_GREEDY = 0,
  LINE_SIM_PROPOSER_ORACLE = 1,
} LineSimProposer;

/**
 * Opaque scoreboard handle.
 */
typedef struct LineScoreboard LineScoreboard;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Error message of the most recent call on this thread, or null if that
 * call succeeded. Valid until the next call into the library on this
 * thread; do not free.
 */
const char *line_last_error(void);

/**
 * Library version as a static string; do not free.
 */
const char *line_version(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void line_string_free(char *s);

/**
 * Canonical form of a concept label.
 *
 * # Safety
 * `raw` must be a valid C string; `out` a valid pointer.
 */
enum LineStatus line_normalize_label(const char *raw, char **out);

/**
 * Mean activation.
 *
 * # Safety
 * `values` must point to `n` doubles; `out` must be valid.
 */
enum LineStatus line_score_avg(const double *values, size_t n, double *out);

/**
 * Fraction of (control, concept) pairs with control strictly below concept.
 *
 * # Safety
 * Arrays must hold `n` and `m` doubles; `out` must be valid.
 */
enum LineStatus line_score_auc(const double *control,
                               size_t n,
                               const double *concept,
                               size_t m,
                               double *out);

/**
 * Concept mean minus control mean, in control standard deviations.
 *
 * # Safety
 * Arrays must hold `n` and `m` doubles; `out` must be valid.
 */
enum LineStatus line_score_mad(const double *control,
                               size_t n,
                               const double *concept,
                               size_t m,
                               double *out);

/**
 * New empty scoreboard for neuron `layer:index`.
 *
 * # Safety
 * `layer` must be a valid C string; `out` a valid pointer.
 */
enum LineStatus line_scoreboard_new(const char *layer, size_t index, struct LineScoreboard **out);

/**
 * Parses a scoreboard from its JSON form.
 *
 * # Safety
 * `json` must be a valid C string; `out` a valid pointer.
 */
enum LineStatus line_scoreboard_from_json(const char *json, struct LineScoreboard **out);

/**
 * Frees a scoreboard. Null is ignored.
 *
 * # Safety
 * `sb` must come from this library and not be freed twice.
 */
void line_scoreboard_free(struct LineScoreboard *sb);

/**
 * Adds an entry. `*added` is false when the label was already present and
 * the existing entry was kept. Steps must not decrease.
 *
 * # Safety
 * `sb`, `label` and `added` must be valid; `added` may be null.
 */
enum LineStatus line_scoreboard_insert(struct LineScoreboard *sb,
                                       const char *label,
                                       double score,
                                       uint32_t step,
                                       enum LineOrigin origin,
                                       bool *added);

/**
 * Number of entries, or 0 for null.
 *
 * # Safety
 * `sb` must be valid or null.
 */
size_t line_scoreboard_len(const struct LineScoreboard *sb);

/**
 * Best entry: highest score, then earliest step, then label.
 *
 * # Safety
 * `sb` must be valid; out-pointers must be valid, `score` and `step` may be null.
 */
enum LineStatus line_scoreboard_best(const struct LineScoreboard *sb,
                                     char **label,
                                     double *score,
                                     uint32_t *step);

/**
 * # Safety
 * `sb` and `out` must be valid.
 */
enum LineStatus line_scoreboard_to_json(const struct LineScoreboard *sb, char **out);

/**
 * The refinement prompt for the current board: all entries by rank and
 * the labels already proposed.
 *
 * # Safety
 * `sb` and `out` must be valid.
 */
enum LineStatus line_render_main_prompt(const struct LineScoreboard *sb, char **out);

/**
 * The summary prompt over the three best entries.
 *
 * # Safety
 * `sb` and `out` must be valid.
 */
enum LineStatus line_render_summary_prompt(const struct LineScoreboard *sb, char **out);

/**
 * Runs a simulated study and returns the layer summary as JSON.
 * `sim_config_json` holds simulation world settings; omitted keys take
 * their defaults, so `"{}"` is valid.
 *
 * # Safety
 * `sim_config_json` must be a valid C string; `out` a valid pointer.
 */
enum LineStatus line_simulate_json(const char *sim_config_json,
                                   uint32_t iterations,
                                   enum LineSimProposer proposer,
                                   char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LINE_H */
