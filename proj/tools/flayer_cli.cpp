// flayer - command-line front end for the simulator.
//
//   flayer run <config.json> [--set key=value]... [--workers N] [--output-root DIR] [--quiet]
//   flayer compare <run-dir>... [--csv PATH]
//   flayer inspect <payload.flyr>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flayer/flayer.h"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int exit_code(flayer_status status) {
  switch (status) {
    case FLAYER_OK: return 0;
    case FLAYER_ERROR_INVALID_ARGUMENT:
    case FLAYER_ERROR_CONFIG:
    case FLAYER_ERROR_INCOMPATIBLE: return kExitUsage;
    default: return kExitRuntime;
  }
}

int report(flayer_status status) {
  std::fprintf(stderr, "flayer: %s: %s\n", flayer_status_name(status), flayer_last_error());
  return exit_code(status);
}

void on_round(uint64_t seed, int32_t round, double mean_acc, void*) {
  std::fprintf(stderr, "seed %llu round %d mean_acc %.4f\n", static_cast<unsigned long long>(seed), round, mean_acc);
}

int cmd_run(const std::string& path, const std::vector<std::string>& sets, unsigned workers,
            const std::string& output_root, bool quiet) {
  flayer_config* cfg = nullptr;
  if (auto s = flayer_config_load(path.c_str(), &cfg); s != FLAYER_OK) return report(s);
  for (const auto& kv : sets) {
    if (auto s = flayer_config_set(cfg, kv.c_str()); s != FLAYER_OK) {
      flayer_config_destroy(cfg);
      return report(s);
    }
  }
  flayer_run* run = nullptr;
  const auto s = flayer_run_experiment(cfg, workers, output_root.empty() ? nullptr : output_root.c_str(),
                                       quiet ? nullptr : on_round, nullptr, &run);
  flayer_config_destroy(cfg);
  if (s != FLAYER_OK) return report(s);

  flayer_run_summary summary{};
  flayer_run_get_summary(run, &summary);
  std::printf("run directory: %s\n", flayer_run_directory(run));
  std::printf("seeds: %zu\n", summary.n_seeds);
  std::printf("final mean accuracy: %.4f (std %.4f)\n", summary.final_mean_acc, summary.final_acc_std);
  std::printf("rounds to convergence: %.1f\n", summary.rounds_to_convergence);
  std::printf("payload bytes per round: %.0f\n", summary.payload_bytes_per_round);
  std::printf("wall time: %.2fs\n", summary.total_wall_s);
  flayer_run_destroy(run);
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& csv_path) {
  std::vector<const char*> ptrs;
  for (const auto& d : dirs) ptrs.push_back(d.c_str());
  flayer_comparison* cmp = nullptr;
  if (auto s = flayer_compare(ptrs.data(), ptrs.size(), &cmp); s != FLAYER_OK) return report(s);
  std::fputs(flayer_comparison_text(cmp), stdout);
  int rc = 0;
  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::binary);
    out << flayer_comparison_csv(cmp);
    if (!out) {
      std::fprintf(stderr, "flayer: cannot write %s\n", csv_path.c_str());
      rc = kExitRuntime;
    }
  }
  flayer_comparison_destroy(cmp);
  return rc;
}

int cmd_inspect(const std::string& path) {
  flayer_payload* p = nullptr;
  if (auto s = flayer_payload_read(path.c_str(), &p); s != FLAYER_OK) return report(s);
  std::printf("client %u round %u layers %zu\n", flayer_payload_client(p), flayer_payload_round(p),
              flayer_payload_layer_count(p));
  for (size_t i = 0; i < flayer_payload_layer_count(p); ++i) {
    flayer_payload_layer layer{};
    flayer_payload_get_layer(p, i, &layer);
    std::printf("  layer %u: %llu/%llu uploaded\n", layer.index, static_cast<unsigned long long>(layer.uploaded),
                static_cast<unsigned long long>(layer.n));
  }
  flayer_payload_destroy(p);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized federated learning simulator"};
  app.set_version_flag("--version", flayer_version());
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  unsigned workers = 1;
  std::string output_root;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Run an experiment from a JSON config");
  run->add_option("config", config_path, "Experiment config file")->required();
  run->add_option("--set", sets, "Override a config field, e.g. --set max_rounds=5");
  run->add_option("--workers", workers, "Client-training threads")->check(CLI::PositiveNumber);
  run->add_option("--output-root", output_root, "Directory to create the run directory in");
  run->add_flag("-q,--quiet", quiet, "No per-round progress");

  std::vector<std::string> dirs;
  std::string csv_path;
  auto* compare = app.add_subcommand("compare", "Compare completed runs");
  compare->add_option("runs", dirs, "Run directories")->required();
  compare->add_option("--csv", csv_path, "Also write the table as CSV");

  std::string payload_path;
  auto* inspect = app.add_subcommand("inspect", "Summarize an upload payload file");
  inspect->add_option("payload", payload_path, "Payload file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  if (*run) return cmd_run(config_path, sets, workers, output_root, quiet);
  if (*compare) return cmd_compare(dirs, csv_path);
  if (*inspect) return cmd_inspect(payload_path);
  return kExitUsage;
}
