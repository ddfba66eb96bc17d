#include "flayer/strategy.hpp"

namespace flayer {

namespace {

ParamSet copy_global(const ParamSet& local, const ParamSet& global, const ClientState&) {
  if (!local.congruent(global)) throw AggregationError("init_local: local and global shapes differ");
  return global;
}

double constant_rate(double base, int, int, double) { return base; }

Upload full_upload(const ParamSet&, const ParamSet& after) { return {after, MaskSet::ones(after)}; }

void check_head(int head_size) {
  if (head_size < 1) throw ConfigError("head_size must be >= 1, got " + std::to_string(head_size));
}

}  // namespace

Strategy fedavg_strategy() {
  return Strategy{"fedavg", 1, copy_global, constant_rate, full_upload};
}

Strategy fedper_strategy(int head_size) {
  check_head(head_size);
  Strategy s;
  s.name = "fedper";
  s.head_size = head_size;
  s.init_local = [head_size](const ParamSet& local, const ParamSet& global, const ClientState&) {
    return init_local_model(local, global, 1.0, head_size);
  };
  s.lr_policy = constant_rate;
  s.upload_transform = [head_size](const ParamSet&, const ParamSet& after) {
    MaskSet mask = MaskSet::ones(after);
    const auto layers = mask.units.size();
    if (static_cast<std::size_t>(head_size) >= layers) {
      throw ConfigError("fedper: head_size " + std::to_string(head_size) + " leaves no base layers");
    }
    for (std::size_t i = layers - static_cast<std::size_t>(head_size); i < layers; ++i) {
      std::fill(mask.units[i].begin(), mask.units[i].end(), std::uint8_t{0});
    }
    return Upload{apply_mask(after, mask), std::move(mask)};
  };
  return s;
}

Strategy flayer_strategy(const FlayerToggles& toggles, int head_size) {
  check_head(head_size);
  Strategy s;
  s.name = "flayer";
  s.head_size = head_size;
  if (toggles.aggregation) {
    s.init_local = [head_size](const ParamSet& local, const ParamSet& global, const ClientState& state) {
      return init_local_model(local, global, state.prev_accuracy, head_size);
    };
  } else {
    s.init_local = copy_global;
  }
  s.lr_policy = toggles.adaptive_lr ? LrPolicy(adaptive_lr) : LrPolicy(constant_rate);
  if (toggles.masking) {
    s.upload_transform = [](const ParamSet& before, const ParamSet& after) {
      MaskSet mask = build_mask(before, after);
      return Upload{apply_mask(after, mask), std::move(mask)};
    };
  } else {
    s.upload_transform = full_upload;
  }
  return s;
}

}  // namespace flayer
