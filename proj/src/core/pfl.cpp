#include "flayer/pfl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flayer/rng.hpp"

namespace flayer {

MaskSet MaskSet::ones(const ParamSet& like) {
  MaskSet m;
  for (const auto& u : like.units) m.units.emplace_back(u.size(), std::uint8_t{1});
  return m;
}

MaskSet MaskSet::zeros(const ParamSet& like) {
  MaskSet m;
  for (const auto& u : like.units) m.units.emplace_back(u.size(), std::uint8_t{0});
  return m;
}

std::size_t MaskSet::popcount(std::size_t unit) const noexcept {
  return static_cast<std::size_t>(std::count(units[unit].begin(), units[unit].end(), std::uint8_t{1}));
}

bool MaskSet::congruent(const ParamSet& params) const noexcept {
  if (units.size() != params.units.size()) return false;
  for (std::size_t i = 0; i < units.size(); ++i) {
    if (units[i].size() != params.units[i].size()) return false;
  }
  return true;
}

ParamSet init_local_model(const ParamSet& local, const ParamSet& global, double prev_acc, int head_size) {
  if (!local.congruent(global)) throw AggregationError("init_local_model: local and global shapes differ");
  const int layers = global.num_layers();
  if (head_size < 1 || head_size >= layers) {
    throw ConfigError("init_local_model: head size " + std::to_string(head_size) + " must be in [1, " +
                      std::to_string(layers - 1) + "]");
  }
  if (!(prev_acc >= 0.0 && prev_acc <= 1.0)) throw ConfigError("init_local_model: prev_acc must be in [0, 1]");

  const double w_local = prev_acc;
  const double w_global = 1.0 - w_local;
  ParamSet out = global;
  for (int i = layers - head_size; i < layers; ++i) {
    auto& unit = out.units[static_cast<std::size_t>(i)];
    const auto& mine = local.units[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < unit.size(); ++j) {
      unit.at(j) = static_cast<float>(w_local * static_cast<double>(mine.at(j)) + w_global * static_cast<double>(unit.at(j)));
    }
  }
  return out;
}

double adaptive_lr(double base, int layer, int num_layers, double grad_l2) {
  constexpr double kGradFloor = 1e-8;
  const double g = std::max(grad_l2, kGradFloor);
  return base * (1.0 + std::log(1.0 + 1.0 / g) * (static_cast<double>(layer) / static_cast<double>(num_layers)));
}

double upload_fraction(int layer, int num_layers) {
  return std::min(std::max(static_cast<double>(layer) / static_cast<double>(num_layers), 0.1), 1.0);
}

std::size_t upload_count(int layer, int num_layers, std::size_t n) {
  // ceil with a small slack so 0.1 * 10 stays 1 despite 0.1 not being exact.
  const double want = upload_fraction(layer, num_layers) * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::ceil(want - 1e-9));
  return std::min(n, std::max<std::size_t>(k, n == 0 ? 0 : 1));
}

MaskSet build_mask(const ParamSet& before, const ParamSet& after) {
  if (!before.congruent(after)) throw AggregationError("build_mask: shapes differ");
  MaskSet mask;
  const int layers = after.num_layers();
  std::vector<double> delta;
  std::vector<std::size_t> order;
  for (int i = 0; i < layers; ++i) {
    const auto& a = after.units[static_cast<std::size_t>(i)];
    const auto& b = before.units[static_cast<std::size_t>(i)];
    const std::size_t n = a.size();
    delta.resize(n);
    for (std::size_t j = 0; j < n; ++j) delta[j] = std::abs(static_cast<double>(a.at(j)) - static_cast<double>(b.at(j)));
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t k = upload_count(i + 1, layers, n);
    auto larger = [&](std::size_t x, std::size_t y) { return delta[x] > delta[y] || (delta[x] == delta[y] && x < y); };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), larger);
    std::vector<std::uint8_t> m(n, 0);
    for (std::size_t r = 0; r < k; ++r) m[order[r]] = 1;
    mask.units.push_back(std::move(m));
  }
  return mask;
}

ParamSet apply_mask(const ParamSet& params, const MaskSet& mask) {
  if (!mask.congruent(params)) throw AggregationError("apply_mask: mask does not match parameters");
  ParamSet out = params;
  for (std::size_t i = 0; i < out.units.size(); ++i) {
    auto& unit = out.units[i];
    for (std::size_t j = 0; j < unit.size(); ++j) {
      if (!mask.units[i][j]) unit.at(j) = 0.0f;
    }
  }
  return out;
}

ParamSet local_train(const Architecture& arch, const ClientState& state, const ParamSet& init,
                     const LocalTrainOptions& options, const LrPolicy& lr_policy) {
  if (options.epochs < 1) throw ConfigError("local_train: epochs must be >= 1");
  if (options.batch_size < 1) throw ConfigError("local_train: batch_size must be >= 1");
  if (!state.data) throw ConfigError("local_train: client " + std::to_string(state.client_id) + " has no data");
  const Dataset& train = state.data->train;
  if (train.size() == 0) throw ConfigError("local_train: client " + std::to_string(state.client_id) + " has no train samples");

  const int layers = init.num_layers();
  ParamSet params = init;
  Rng rng(options.batch_seed);
  std::vector<std::size_t> order(train.size());
  std::vector<double> rates(static_cast<std::size_t>(layers));
  const auto bs = static_cast<std::size_t>(options.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      const Batch batch = train.batch(idx);
      BackwardResult br;
      try {
        br = backward(arch, params, batch);
      } catch (const NumericError& e) {
        throw NumericError("client " + std::to_string(state.client_id) + " epoch " + std::to_string(epoch) + " step " +
                               std::to_string(step) + ": " + e.what(),
                           e.layer());
      }
      const auto norms = layer_grad_norms(br.grads);
      for (int i = 0; i < layers; ++i) {
        rates[static_cast<std::size_t>(i)] = lr_policy(options.base_lr, i + 1, layers, norms[static_cast<std::size_t>(i)]);
      }
      params = sgd_step(params, br.grads, rates);
    }
  }
  return params;
}

double accuracy(const Architecture& arch, const ParamSet& params, const Dataset& ds) {
  if (ds.size() == 0) throw ConfigError("accuracy: empty dataset '" + ds.name + "'");
  constexpr std::size_t kChunk = 512;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    const std::size_t end = std::min(ds.size(), start + kChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = ds.batch(idx);
    const Tensor logits = forward(arch, params, b.inputs).logits;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto row = logits.row(r);
      const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (pred == b.labels[r]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

double update_prev_accuracy(const Architecture& arch, ClientState& state, const ParamSet& trained) {
  if (!state.data || state.data->train.size() == 0) {
    throw ConfigError("update_prev_accuracy: client " + std::to_string(state.client_id) + " has an empty train split");
  }
  state.prev_accuracy = accuracy(arch, trained, state.data->train);
  return state.prev_accuracy;
}

}  // namespace flayer
