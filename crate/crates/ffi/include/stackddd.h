#ifndef STACKDDD_H
#define STACKDDD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SDDD_OK 0

/**
 * A required pointer argument was null.
 */
#define SDDD_ERR_NULL 1

/**
 * A string argument was not UTF-8 or a JSON argument did not parse.
 */
#define SDDD_ERR_ARGUMENT 2

#define SDDD_ERR_IO 3

/**
 * Malformed panel input: parse, schema or duplicate-observation errors.
 */
#define SDDD_ERR_DATA 4

/**
 * The data or design do not support the requested computation.
 */
#define SDDD_ERR_ESTIMATION 5

/**
 * The panel failed validation; the report is still written.
 */
#define SDDD_ERR_INVALID_PANEL 6

/**
 * An internal panic was caught at the boundary.
 */
#define SDDD_ERR_PANIC 7

/**
 * Opaque panel handle.
 */
typedef struct SdddPanel SdddPanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *sddd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sddd_version(void);

/**
 * Reads a panel from a CSV file. `schema_json` maps column names and may be null.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string, `schema_json` null or
 * NUL-terminated, and `out` a valid pointer.
 */
int32_t sddd_panel_read_csv(const char *path, const char *schema_json, struct SdddPanel **out);

/**
 * Parses a panel from an in-memory CSV buffer of `len` bytes.
 *
 * # Safety
 * `data` must point to `len` readable bytes; see [`sddd_panel_read_csv`].
 */
int32_t sddd_panel_parse_csv(const uint8_t *data,
                             size_t len,
                             const char *schema_json,
                             struct SdddPanel **out);

/**
 * Simulates a panel from a JSON data-generating configuration.
 *
 * # Safety
 * `dgp_json` must be NUL-terminated and `out` a valid pointer.
 */
int32_t sddd_panel_simulate(const char *dgp_json, struct SdddPanel **out);

/**
 * Releases a panel. Null is ignored.
 *
 * # Safety
 * `panel` must come from this library and not be used afterwards.
 */
void sddd_panel_free(struct SdddPanel *panel);

/**
 * Number of units in the panel.
 *
 * # Safety
 * `panel` must be a live handle and `out` a valid pointer.
 */
int32_t sddd_panel_n_units(const struct SdddPanel *panel, size_t *out);

/**
 * Validation report as JSON. Returns `SDDD_ERR_INVALID_PANEL` when the
 * report lists violations; `*out_json` is set in both cases.
 *
 * # Safety
 * `panel` must be a live handle and `out_json` a valid pointer.
 */
int32_t sddd_validate(const struct SdddPanel *panel, char **out_json);

/**
 * Stacked event study. The JSON result has `stacks`, `event_study` and
 * `inference` members shaped like the command-line output files.
 *
 * # Safety
 * `panel` must be a live handle, `config_json` null or NUL-terminated, and
 * `out_json` a valid pointer.
 */
int32_t sddd_estimate(const struct SdddPanel *panel, const char *config_json, char **out_json);

/**
 * Implicit-weight decomposition of the pooled event study. The JSON result
 * has `aux_weights`, `agg_weights`, `properties` and `decomposition` members.
 *
 * # Safety
 * Same as [`sddd_estimate`].
 */
int32_t sddd_decompose(const struct SdddPanel *panel, const char *config_json, char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void sddd_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STACKDDD_H */
