#include "flayer/flayer.h"

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "flayer/config.hpp"
#include "flayer/payload.hpp"
#include "flayer/runner.hpp"

struct flayer_config {
  flayer::ExperimentConfig cfg;
};

struct flayer_run {
  flayer::RunOutcome outcome;
  std::string dir;
};

struct flayer_comparison {
  std::string csv;
  std::string text;
};

struct flayer_payload {
  flayer::DecodedPayload decoded;
};

namespace {

thread_local std::string g_last_error;

flayer_status fail(flayer_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

template <typename F>
flayer_status guarded(F&& f) {
  try {
    f();
    return FLAYER_OK;
  } catch (const flayer::ConfigError& e) {
    return fail(FLAYER_ERROR_CONFIG, e.what());
  } catch (const flayer::IncompatibleRunsError& e) {
    return fail(FLAYER_ERROR_INCOMPATIBLE, e.what());
  } catch (const flayer::NumericError& e) {
    return fail(FLAYER_ERROR_NUMERIC, e.what());
  } catch (const flayer::IngestionError& e) {
    return fail(FLAYER_ERROR_IO, e.what());
  } catch (const flayer::Error& e) {
    return fail(FLAYER_ERROR_RUNTIME, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(FLAYER_ERROR_IO, e.what());
  } catch (const std::exception& e) {
    return fail(FLAYER_ERROR_RUNTIME, e.what());
  } catch (...) {
    return fail(FLAYER_ERROR_RUNTIME, "unknown error");
  }
}

}  // namespace

extern "C" {

const char* flayer_version(void) { return "0.1.0"; }

const char* flayer_last_error(void) { return g_last_error.c_str(); }

const char* flayer_status_name(flayer_status status) {
  switch (status) {
    case FLAYER_OK: return "ok";
    case FLAYER_ERROR_INVALID_ARGUMENT: return "invalid argument";
    case FLAYER_ERROR_CONFIG: return "configuration error";
    case FLAYER_ERROR_RUNTIME: return "runtime error";
    case FLAYER_ERROR_NUMERIC: return "numeric error";
    case FLAYER_ERROR_IO: return "i/o error";
    case FLAYER_ERROR_INCOMPATIBLE: return "incompatible runs";
    case FLAYER_ERROR_BUFFER_TOO_SMALL: return "buffer too small";
  }
  return "unknown";
}

// ----------------------------------------------------------------------------
// Config
//

flayer_status flayer_config_load(const char* path, flayer_config** out) {
  if (!path || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_config_load: null argument");
  return guarded([&] { *out = new flayer_config{flayer::load_config(path)}; });
}

flayer_status flayer_config_parse(const char* json_text, flayer_config** out) {
  if (!json_text || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_config_parse: null argument");
  return guarded([&] { *out = new flayer_config{flayer::parse_config(json_text)}; });
}

flayer_status flayer_config_set(flayer_config* config, const char* assignment) {
  if (!config || !assignment) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_config_set: null argument");
  return guarded([&] { config->cfg = flayer::apply_overrides(config->cfg, {assignment}); });
}

flayer_status flayer_config_to_json(const flayer_config* config, char* buffer, size_t capacity, size_t* required) {
  if (!config) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_config_to_json: null config");
  const std::string text = flayer::to_json_text(config->cfg);
  if (required) *required = text.size() + 1;
  if (!buffer || capacity < text.size() + 1) {
    return fail(FLAYER_ERROR_BUFFER_TOO_SMALL, "flayer_config_to_json: need " + std::to_string(text.size() + 1) + " bytes");
  }
  std::memcpy(buffer, text.c_str(), text.size() + 1);
  return FLAYER_OK;
}

flayer_status flayer_config_hash(const flayer_config* config, char out[17]) {
  if (!config || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_config_hash: null argument");
  const std::string h = flayer::config_hash(config->cfg);
  std::memcpy(out, h.c_str(), 17);
  return FLAYER_OK;
}

void flayer_config_destroy(flayer_config* config) { delete config; }

// ----------------------------------------------------------------------------
// Runs
//

flayer_status flayer_run_experiment(const flayer_config* config, unsigned workers, const char* output_root,
                                    flayer_round_callback callback, void* user_data, flayer_run** out) {
  if (!config || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_run_experiment: null argument");
  return guarded([&] {
    flayer::RunOptions options;
    options.workers = workers == 0 ? 1 : workers;
    if (output_root) options.output_root = std::filesystem::path(output_root);
    if (callback) {
      options.on_round = [&](std::uint64_t seed, const flayer::RoundReport& r) {
        callback(seed, r.round, r.mean_acc, user_data);
      };
    }
    auto run = std::make_unique<flayer_run>();
    run->outcome = flayer::run(config->cfg, options);
    run->dir = run->outcome.dir.string();
    *out = run.release();
  });
}

const char* flayer_run_directory(const flayer_run* run) { return run ? run->dir.c_str() : nullptr; }

flayer_status flayer_run_get_summary(const flayer_run* run, flayer_run_summary* out) {
  if (!run || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_run_get_summary: null argument");
  const auto& s = run->outcome.summary;
  *out = flayer_run_summary{s.n_seeds,        s.rounds_to_convergence, s.final_mean_acc,
                            s.final_acc_std,  s.total_wall_s,          s.payload_bytes_per_round};
  return FLAYER_OK;
}

void flayer_run_destroy(flayer_run* run) { delete run; }

// ----------------------------------------------------------------------------
// Comparison
//

flayer_status flayer_compare(const char* const* run_dirs, size_t count, flayer_comparison** out) {
  if (!run_dirs || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_compare: null argument");
  return guarded([&] {
    std::vector<std::filesystem::path> dirs;
    for (size_t i = 0; i < count; ++i) {
      if (!run_dirs[i]) throw flayer::ConfigError("flayer_compare: null run directory");
      dirs.emplace_back(run_dirs[i]);
    }
    const auto table = flayer::compare(dirs);
    *out = new flayer_comparison{table.csv(), table.text()};
  });
}

const char* flayer_comparison_csv(const flayer_comparison* comparison) {
  return comparison ? comparison->csv.c_str() : nullptr;
}

const char* flayer_comparison_text(const flayer_comparison* comparison) {
  return comparison ? comparison->text.c_str() : nullptr;
}

void flayer_comparison_destroy(flayer_comparison* comparison) { delete comparison; }

// ----------------------------------------------------------------------------
// Payloads
//

flayer_status flayer_payload_read(const char* path, flayer_payload** out) {
  if (!path || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_payload_read: null argument");
  return guarded([&] { *out = new flayer_payload{flayer::read_payload_file(path)}; });
}

flayer_status flayer_payload_decode(const uint8_t* bytes, size_t size, flayer_payload** out) {
  if ((!bytes && size) || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_payload_decode: null argument");
  return guarded([&] { *out = new flayer_payload{flayer::decode_payload({bytes, size})}; });
}

uint32_t flayer_payload_client(const flayer_payload* payload) { return payload ? payload->decoded.client_id : 0; }

uint32_t flayer_payload_round(const flayer_payload* payload) { return payload ? payload->decoded.round : 0; }

size_t flayer_payload_layer_count(const flayer_payload* payload) {
  return payload ? payload->decoded.layers.size() : 0;
}

flayer_status flayer_payload_get_layer(const flayer_payload* payload, size_t position, flayer_payload_layer* out) {
  if (!payload || !out) return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_payload_get_layer: null argument");
  if (position >= payload->decoded.layers.size()) {
    return fail(FLAYER_ERROR_INVALID_ARGUMENT, "flayer_payload_get_layer: position " + std::to_string(position) +
                                                   " out of range");
  }
  const auto& l = payload->decoded.layers[position];
  *out = flayer_payload_layer{l.index, l.values.size(), l.uploaded(), l.values.data(), l.mask.data()};
  return FLAYER_OK;
}

void flayer_payload_destroy(flayer_payload* payload) { delete payload; }

}  // extern "C"
