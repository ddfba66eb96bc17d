#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "flayer/data.hpp"
#include "flayer/nn.hpp"

namespace flayer {

/// Per-unit 0/1 selectors, flat over weights then bias like UnitTensors::at.
struct MaskSet {
  std::vector<std::vector<std::uint8_t>> units;

  static MaskSet ones(const ParamSet& like);
  static MaskSet zeros(const ParamSet& like);

  std::size_t popcount(std::size_t unit) const noexcept;
  bool congruent(const ParamSet& params) const noexcept;

  friend bool operator==(const MaskSet&, const MaskSet&) = default;
};

/// Head initialization guarded by local accuracy. Units 1..L-s are copied
/// from `global`; units L-s+1..L become prev_acc*local + (1-prev_acc)*global.
ParamSet init_local_model(const ParamSet& local, const ParamSet& global, double prev_acc, int head_size);

/// Layer-specific rate base * (1 + ln(1 + 1/max(grad_l2, 1e-8)) * i/L), i 1-based.
double adaptive_lr(double base, int layer, int num_layers, double grad_l2);

/// Fraction of unit i's parameters uploaded: min(max(i/L, 0.1), 1).
double upload_fraction(int layer, int num_layers);

/// ceil(upload_fraction(i, L) * n).
std::size_t upload_count(int layer, int num_layers, std::size_t n);

/// Keeps the upload_count(i, L, n_i) entries of each unit with the largest
/// |after - before|; ties go to the lower flat index.
MaskSet build_mask(const ParamSet& before, const ParamSet& after);

/// Entries with mask 0 become exactly +0.
ParamSet apply_mask(const ParamSet& params, const MaskSet& mask);

struct ClientState {
  int client_id = 0;
  ParamSet local_params;
  /// Train accuracy of the last trained local model; 0 before the first round.
  double prev_accuracy = 0.0;
  std::shared_ptr<const ClientDataset> data;
  int head_size = 1;

  friend bool operator==(const ClientState&, const ClientState&) = default;
};

/// rate = policy(base, i, L, ||g_i||_2).
using LrPolicy = std::function<double(double base, int layer, int num_layers, double grad_l2)>;

struct LocalTrainOptions {
  int epochs = 1;
  int batch_size = 10;
  double base_lr = 0.005;
  /// Seeds the per-epoch shuffle; derive it from (seed, round, client).
  std::uint64_t batch_seed = 0;
};

/// Mini-batch SGD over the client's train split starting at `init`. Rates are
/// recomputed every step from that step's per-unit gradient norms.
ParamSet local_train(const Architecture& arch, const ClientState& state, const ParamSet& init,
                     const LocalTrainOptions& options, const LrPolicy& lr_policy);

/// Argmax accuracy of `params` on `ds`.
double accuracy(const Architecture& arch, const ParamSet& params, const Dataset& ds);

/// Evaluates `trained` on the client's train split and caches it as prev_accuracy.
double update_prev_accuracy(const Architecture& arch, ClientState& state, const ParamSet& trained);

}  // namespace flayer
