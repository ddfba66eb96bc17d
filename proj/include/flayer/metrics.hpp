#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "flayer/data.hpp"
#include "flayer/nn.hpp"

namespace flayer {

struct ClientMetrics {
  int client_id = 0;
  double test_acc = 0.0;
  double test_loss = 0.0;
  double train_acc = 0.0;
  std::size_t m_k = 0;

  friend bool operator==(const ClientMetrics&, const ClientMetrics&) = default;
};

struct RoundReport {
  int round = 0;
  std::vector<int> sampled;
  std::vector<ClientMetrics> per_client;
  double mean_acc = 0.0;
  /// sum_k m_k / M * test_loss_k over the evaluated clients.
  double weighted_loss = 0.0;
  /// Serialized upload size of the round, summed over sampled clients.
  std::size_t payload_bytes = 0;
  /// Uploaded (mask=1) entries per unit, summed over sampled clients.
  std::vector<std::size_t> uploaded_per_layer;
  double elapsed_s = 0.0;
};

struct Evaluation {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Argmax accuracy and mean cross-entropy over the whole dataset.
Evaluation evaluate(const Architecture& arch, const ParamSet& params, const Dataset& ds);

/// Fills mean_acc and weighted_loss from per_client.
void summarize(RoundReport& report);

/// Linear CKA of two feature matrices (n x d1, n x d2) with the same rows.
/// Returns 0 when either side has zero variance after centering.
double linear_cka(const BasicTensor<double>& x, const BasicTensor<double>& y);

struct SimilarityMatrix {
  int layer = 0;
  std::size_t n_clients = 0;
  std::vector<double> values;  // row-major n x n
  double mean_off_diagonal = 0.0;

  double at(std::size_t a, std::size_t b) const noexcept { return values[a * n_clients + b]; }
};

/// CKA between every pair of models' activations of the same unit on a shared
/// probe batch; mean_off_diagonal averages unordered pairs.
std::vector<SimilarityMatrix> cross_client_layer_similarity(const Architecture& arch,
                                                            std::span<const ParamSet> models,
                                                            const Tensor& probe, std::span<const int> layers);

/// Early-stopping bookkeeping on mean accuracy: a round improves when it
/// beats the best so far by more than delta; training stops once `window`
/// rounds in a row fail to improve.
class ConvergenceTracker {
 public:
  ConvergenceTracker(double delta, int window);

  /// Returns true when training should stop after this round.
  bool update(int round, double mean_acc);
  /// Last round that improved; 0 before any update.
  int rounds_to_convergence() const noexcept { return last_improved_; }
  double best() const noexcept { return best_; }

 private:
  double delta_;
  int window_;
  double best_;
  int last_improved_ = 0;
};

/// Offline replay of ConvergenceTracker over a mean-accuracy series (round r = index + 1).
int rounds_to_convergence(std::span<const double> mean_accs, double delta, int window);

}  // namespace flayer
