#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flayer/config.hpp"

namespace flayer {

/// Source dataset for one seed (synthetic data is regenerated per seed).
Dataset load_dataset(const ExperimentConfig& cfg, std::uint64_t seed);

/// Partitioned clients, architecture and strategy for one seed.
ExperimentSetup make_setup(const ExperimentConfig& cfg, std::uint64_t seed, unsigned workers = 1);

/// Shared probe batch: `size` rows drawn from the union of client test sets.
Tensor make_probe(const ExperimentSetup& setup, std::size_t size, std::uint64_t seed);

struct SeedSummary {
  std::uint64_t seed = 0;
  int rounds_run = 0;
  int rounds_to_convergence = 0;
  double final_mean_acc = 0.0;
  double best_mean_acc = 0.0;
  double wall_s = 0.0;
  double payload_bytes_per_round = 0.0;
};

struct RunSummary {
  std::string config_hash;
  std::string data_hash;
  std::string name;
  std::string strategy;
  std::size_t n_seeds = 0;
  double rounds_to_convergence = 0.0;  // mean over seeds
  double final_mean_acc = 0.0;
  double final_acc_std = 0.0;
  double total_wall_s = 0.0;
  double payload_bytes_per_round = 0.0;
};

struct RunOutcome {
  std::filesystem::path dir;
  std::vector<SeedSummary> seeds;
  RunSummary summary;
};

struct RunOptions {
  unsigned workers = 1;
  /// Takes precedence over FLAYER_OUTPUT_ROOT and the config's output_dir.
  std::optional<std::filesystem::path> output_root;
  std::function<void(std::uint64_t seed, const RoundReport&)> on_round;
};

/// Runs every seed and writes config.json, manifest.json, rounds_seed<S>.jsonl,
/// timing.csv, seeds.csv, summary.csv and, when enabled, cka_seed<S>.json and
/// payloads/seed<S>/r<round>_c<client>.flyr under <root>/<name>-<config hash>.
RunOutcome run(const ExperimentConfig& cfg, const RunOptions& options = {});

/// One JSON-lines record; deterministic for a given report.
std::string round_log_line(std::uint64_t seed, const RoundReport& report);

struct ComparisonRow {
  std::string run;
  std::string strategy;
  std::string config_hash;
  double rounds_to_convergence = 0.0;
  double final_mean_acc = 0.0;
  double final_acc_std = 0.0;
  double payload_bytes_per_round = 0.0;
  double delta_acc = 0.0;  // against the first run
  double delta_rounds = 0.0;
  double delta_bytes = 0.0;
};

struct ComparisonTable {
  std::string data_hash;
  std::vector<ComparisonRow> rows;

  std::string csv() const;
  std::string text() const;
};

/// Aligns completed runs; throws IncompatibleRunsError when data hashes differ.
ComparisonTable compare(std::span<const std::filesystem::path> run_dirs);

}  // namespace flayer
