#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flayer/server.hpp"

namespace flayer {

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | csv | idx
  int classes = 8;
  int dims = 32;
  int samples_per_class = 300;
  double class_separation = 3.0;
  std::string path;  // csv
  std::string label_column = "label";
  std::vector<std::string> feature_columns;
  std::string images;  // idx
  std::string labels;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct PartitionConfig {
  int n_clients = 20;
  double beta = 0.1;
  int min_per_client = 20;
  int max_retries = 1000;
  double test_fraction = 0.25;

  friend bool operator==(const PartitionConfig&, const PartitionConfig&) = default;
};

struct ArchitectureConfig {
  std::string kind = "mlp";  // mlp | cnn
  std::vector<int> hidden = {64, 32};
  std::vector<int> input;  // cnn: C, H, W
  std::vector<int> channels = {8, 16};
  int kernel = 3;
  std::string padding = "same";

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

struct StrategyConfig {
  std::string name = "flayer";  // flayer | fedavg | fedper
  FlayerToggles toggles;

  friend bool operator==(const StrategyConfig&, const StrategyConfig&) = default;
};

struct CkaConfig {
  bool enabled = false;
  int probe_size = 256;
  std::vector<int> layers;  // empty: every unit

  friend bool operator==(const CkaConfig&, const CkaConfig&) = default;
};

/// Everything needed to reproduce a run. Parsing rejects unknown keys.
struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset;
  PartitionConfig partition;
  ArchitectureConfig architecture;
  StrategyConfig strategy;
  int head_size = 1;
  double base_lr = 0.005;
  int batch_size = 10;
  int local_epochs = 1;
  double join_ratio = 1.0;
  int max_rounds = 100;
  double early_stop_delta = 0.001;
  int early_stop_window = 20;
  AggregationMode aggregation = AggregationMode::mask_aware;
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds = {0};
  CkaConfig cka;
  bool dump_payloads = false;
  /// Directory relative dataset paths resolve against; not serialized.
  std::filesystem::path base_dir;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Parses and validates; ConfigError messages start with the field path.
ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Applies "dotted.key=value" to a config document (value parsed as JSON, else
/// taken as a string) and re-validates.
ExperimentConfig apply_overrides(const ExperimentConfig& cfg, const std::vector<std::string>& overrides);

/// Canonical JSON with every default explicit.
std::string to_json_text(const ExperimentConfig& cfg, int indent = 2);

/// 16 hex digits over the canonical JSON (output_dir excluded).
std::string config_hash(const ExperimentConfig& cfg);
/// Hash over dataset, partition and seeds: runs with equal data hashes saw the same clients.
std::string data_hash(const ExperimentConfig& cfg);

Architecture build_architecture(const ExperimentConfig& cfg, std::size_t input_size, int num_classes);
Strategy build_strategy(const ExperimentConfig& cfg);

}  // namespace flayer
