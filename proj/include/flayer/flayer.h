/*
 * flayer.h - C interface to the flayer federated-learning simulator.
 *
 * All objects are opaque handles created by a *_load / *_parse / run call and
 * released with the matching *_destroy. Every fallible call returns a
 * flayer_status; on failure flayer_last_error() describes the problem for
 * the calling thread until its next failing call.
 */
#ifndef FLAYER_H_
#define FLAYER_H_

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define FLAYER_API __declspec(dllexport)
#else
#define FLAYER_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum flayer_status {
  FLAYER_OK = 0,
  FLAYER_ERROR_INVALID_ARGUMENT = 1,
  FLAYER_ERROR_CONFIG = 2,
  FLAYER_ERROR_RUNTIME = 3,
  FLAYER_ERROR_NUMERIC = 4,
  FLAYER_ERROR_IO = 5,
  FLAYER_ERROR_INCOMPATIBLE = 6,
  FLAYER_ERROR_BUFFER_TOO_SMALL = 7
} flayer_status;

typedef struct flayer_config flayer_config;
typedef struct flayer_run flayer_run;
typedef struct flayer_comparison flayer_comparison;
typedef struct flayer_payload flayer_payload;

FLAYER_API const char* flayer_version(void);
FLAYER_API const char* flayer_last_error(void);
FLAYER_API const char* flayer_status_name(flayer_status status);

/* ---- experiment configuration ------------------------------------------ */

FLAYER_API flayer_status flayer_config_load(const char* path, flayer_config** out);
FLAYER_API flayer_status flayer_config_parse(const char* json_text, flayer_config** out);
/* "dotted.key=value"; value is parsed as JSON, else taken as a string. */
FLAYER_API flayer_status flayer_config_set(flayer_config* config, const char* assignment);
/* Canonical JSON with defaults explicit. Writes at most `capacity` bytes
 * including the terminator; *required always receives the full size. */
FLAYER_API flayer_status flayer_config_to_json(const flayer_config* config, char* buffer, size_t capacity,
                                               size_t* required);
/* 16 hex digits plus terminator. */
FLAYER_API flayer_status flayer_config_hash(const flayer_config* config, char out[17]);
FLAYER_API void flayer_config_destroy(flayer_config* config);

/* ---- running ------------------------------------------------------------ */

typedef void (*flayer_round_callback)(uint64_t seed, int32_t round, double mean_acc, void* user_data);

typedef struct flayer_run_summary {
  size_t n_seeds;
  double rounds_to_convergence;
  double final_mean_acc;
  double final_acc_std;
  double total_wall_s;
  double payload_bytes_per_round;
} flayer_run_summary;

/* output_root may be NULL (then FLAYER_OUTPUT_ROOT, then the config's
 * output_dir). callback may be NULL. Results do not depend on workers. */
FLAYER_API flayer_status flayer_run_experiment(const flayer_config* config, unsigned workers, const char* output_root,
                                               flayer_round_callback callback, void* user_data, flayer_run** out);
FLAYER_API const char* flayer_run_directory(const flayer_run* run);
FLAYER_API flayer_status flayer_run_get_summary(const flayer_run* run, flayer_run_summary* out);
FLAYER_API void flayer_run_destroy(flayer_run* run);

/* ---- comparing runs ----------------------------------------------------- */

FLAYER_API flayer_status flayer_compare(const char* const* run_dirs, size_t count, flayer_comparison** out);
FLAYER_API const char* flayer_comparison_csv(const flayer_comparison* comparison);
FLAYER_API const char* flayer_comparison_text(const flayer_comparison* comparison);
FLAYER_API void flayer_comparison_destroy(flayer_comparison* comparison);

/* ---- upload payload files ----------------------------------------------- */

typedef struct flayer_payload_layer {
  uint16_t index;   /* 1-based unit index */
  uint64_t n;       /* parameter count */
  uint64_t uploaded; /* entries with mask bit set */
  const float* values;
  const uint8_t* mask; /* one byte (0/1) per entry */
} flayer_payload_layer;

FLAYER_API flayer_status flayer_payload_read(const char* path, flayer_payload** out);
FLAYER_API flayer_status flayer_payload_decode(const uint8_t* bytes, size_t size, flayer_payload** out);
FLAYER_API uint32_t flayer_payload_client(const flayer_payload* payload);
FLAYER_API uint32_t flayer_payload_round(const flayer_payload* payload);
FLAYER_API size_t flayer_payload_layer_count(const flayer_payload* payload);
FLAYER_API flayer_status flayer_payload_get_layer(const flayer_payload* payload, size_t position,
                                                  flayer_payload_layer* out);
FLAYER_API void flayer_payload_destroy(flayer_payload* payload);

#ifdef __cplusplus
}
#endif

#endif /* FLAYER_H_ */
