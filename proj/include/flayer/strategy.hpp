#pragma once

#include <functional>
#include <string>

#include "flayer/pfl.hpp"

namespace flayer {

struct Upload {
  ParamSet params;
  MaskSet mask;
};

/// Per-round client behaviour. Every hook is a pure function of its inputs.
struct Strategy {
  std::string name;
  int head_size = 1;
  /// Builds the model a client trains from (and is evaluated with).
  std::function<ParamSet(const ParamSet& local, const ParamSet& global, const ClientState& state)> init_local;
  LrPolicy lr_policy;
  /// Turns (model before training, model after training) into the upload.
  std::function<Upload(const ParamSet& before, const ParamSet& after)> upload_transform;
};

struct FlayerToggles {
  bool aggregation = true;
  bool adaptive_lr = true;
  bool masking = true;

  friend bool operator==(const FlayerToggles&, const FlayerToggles&) = default;
};

/// Whole global model in, constant rate, full upload.
Strategy fedavg_strategy();

/// Global base + the client's own head; heads are never uploaded.
Strategy fedper_strategy(int head_size);

/// Each disabled toggle falls back to the FedAvg hook.
Strategy flayer_strategy(const FlayerToggles& toggles, int head_size);

}  // namespace flayer
