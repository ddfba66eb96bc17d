#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "flayer/metrics.hpp"
#include "flayer/payload.hpp"
#include "flayer/strategy.hpp"

namespace flayer {

enum class AggregationMode {
  /// Weighted sum of masked parameters, zeros included.
  literal,
  /// Per entry, weighted mean over the clients that uploaded it; entries
  /// nobody uploaded keep their previous global value.
  mask_aware,
};

struct GlobalState {
  int round = 0;
  ParamSet params;
  std::uint64_t seed = 0;
};

/// max(1, round(rho * n)) distinct ids, uniform without replacement, ascending.
std::vector<int> sample_clients(int n, double rho, std::uint64_t seed);

ParamSet aggregate(std::span<const UploadPayload> payloads, const ParamSet& prev_global, AggregationMode mode);

struct RoundConfig {
  int local_epochs = 1;
  int batch_size = 10;
  double base_lr = 0.005;
  double join_ratio = 1.0;
  AggregationMode aggregation = AggregationMode::mask_aware;
  unsigned workers = 1;
};

struct RoundOutput {
  GlobalState global;
  RoundReport report;
  std::vector<UploadPayload> payloads;  // ordered by client id
};

/// One iteration: sample, initialize/train/mask each sampled client,
/// aggregate, then evaluate every client's personalized model on its test
/// split. Only sampled clients' states change.
RoundOutput run_round(const GlobalState& global, std::vector<ClientState>& clients, const Architecture& arch,
                      const Strategy& strategy, const RoundConfig& cfg);

struct ExperimentSetup {
  Architecture arch;
  Strategy strategy;
  std::vector<std::shared_ptr<const ClientDataset>> clients;
  RoundConfig round;
  int max_rounds = 100;
  double early_stop_delta = 0.001;
  int early_stop_window = 20;
  std::uint64_t seed = 0;
};

struct ExperimentResult {
  std::vector<RoundReport> reports;
  ParamSet initial_global;
  GlobalState global;
  std::vector<ClientState> clients;
  /// init_local(local, final global) per client: the models clients would use.
  std::vector<ParamSet> personalized;
  int rounds_to_convergence = 0;
  bool stopped_early = false;
};

using RoundObserver = std::function<void(const RoundOutput&)>;

ExperimentResult run_experiment(const ExperimentSetup& setup, const RoundObserver& observer = {});

/// Runs fn(0..count-1) on up to `workers` threads; rethrows the exception of
/// the lowest failing index.
void parallel_for(std::size_t count, unsigned workers, const std::function<void(std::size_t)>& fn);

}  // namespace flayer
