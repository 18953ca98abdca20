/*
 * C API for the mimicparts speech-driven stylized motion pipeline.
 *
 * All functions are synchronous. A pipeline handle binds one configuration
 * to one run directory; handles are not thread-safe, but independent
 * handles may be used from different threads.
 *
 * Functions return mp_status; on failure a human-readable message is
 * available from mp_pipeline_last_error() until the next call on the same
 * handle. Strings returned through char** out-parameters are heap-allocated
 * and must be released with mp_string_free().
 */
#ifndef MIMICPARTS_H
#define MIMICPARTS_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mp_status {
  MP_OK = 0,
  MP_ERR_VALIDATION = 2,
  MP_ERR_MISSING_PREREQUISITE = 3,
  MP_ERR_IO = 4,
  MP_ERR_INTERNAL = 5
} mp_status;

typedef struct mp_pipeline mp_pipeline;

const char* mp_version(void);

/* The full default configuration as a flat-key JSON document. The returned
 * string is owned by the library and valid for the process lifetime. */
const char* mp_default_config_json(void);

/* Creates a handle bound to run_dir. config_json may be NULL or "{}" for
 * defaults; flat dotted keys override individual fields. The handle is
 * always allocated (check the returned status; an invalid configuration
 * leaves the handle usable only for mp_pipeline_last_error). The
 * MIMICPARTS_SEED environment variable, when set, overrides the seed. */
mp_status mp_pipeline_create(const char* config_json, const char* run_dir,
                             mp_pipeline** out);
void mp_pipeline_destroy(mp_pipeline* p);
const char* mp_pipeline_last_error(const mp_pipeline* p);

/* Synthesizes the styled dataset (clips, feature files, manifest). */
mp_status mp_synth_data(mp_pipeline* p);

/* stage: "rvq" | "style" | "diffusion". Stage ordering is enforced:
 * diffusion requires the rvq and style checkpoints. Partial checkpoints
 * resume unless fresh is nonzero. */
mp_status mp_train(mp_pipeline* p, const char* stage, int fresh);

/* request_json (all keys optional):
 *   {"n_clips":16, "seed":7, "weights":[1.0,2.0,1.0], "n_steps":50,
 *    "style":2, "audio_features":"path.mpsf", "reference_clip":"path.mpcl",
 *    "tag":"default", "variant":"full", "export_indices":false}
 * On success *manifest_json_out receives the sampling manifest. */
mp_status mp_generate(mp_pipeline* p, const char* request_json,
                      char** manifest_json_out);

/* request_json (all keys optional):
 *   {"generated":"default" | "split:test", "reference":"test",
 *    "metrics":["fgd","bc","diversity","sra"], "report_name":"..."}
 * On success *report_json_out receives the metric report. */
mp_status mp_evaluate(mp_pipeline* p, const char* request_json,
                      char** report_json_out);

/* rows_csv: comma-separated subset of
 * "no_part_style,no_rhythm,no_emotion,no_rhythm_emotion". */
mp_status mp_ablate(mp_pipeline* p, const char* rows_csv, char** report_json_out);

/* Finite-difference verification of every trainable module's gradients. */
mp_status mp_grad_check(mp_pipeline* p, char** report_json_out);

void mp_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif /* MIMICPARTS_H */
