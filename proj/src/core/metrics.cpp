#include "flayer/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

namespace flayer {

Evaluation evaluate(const Architecture& arch, const ParamSet& params, const Dataset& ds) {
  if (ds.size() == 0) throw ConfigError("evaluate: empty dataset '" + ds.name + "'");
  constexpr std::size_t kChunk = 512;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    const std::size_t end = std::min(ds.size(), start + kChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Batch b = ds.batch(idx);
    const Tensor logits = forward(arch, params, b.inputs).logits;
    loss_sum += cross_entropy(logits, b.labels) * static_cast<double>(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto row = logits.row(r);
      if (std::max_element(row.begin(), row.end()) - row.begin() == b.labels[r]) ++correct;
    }
  }
  const auto n = static_cast<double>(ds.size());
  return {static_cast<double>(correct) / n, loss_sum / n};
}

void summarize(RoundReport& report) {
  double acc = 0.0, loss = 0.0, total = 0.0;
  for (const auto& c : report.per_client) {
    acc += c.test_acc;
    total += static_cast<double>(c.m_k);
  }
  for (const auto& c : report.per_client) loss += static_cast<double>(c.m_k) / total * c.test_loss;
  report.mean_acc = report.per_client.empty() ? 0.0 : acc / static_cast<double>(report.per_client.size());
  report.weighted_loss = report.per_client.empty() ? 0.0 : loss;
}

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::MatrixXd centered(const BasicTensor<double>& t) {
  Eigen::Map<const RowMatrix> m(t.raw().data(), static_cast<Eigen::Index>(t.rows()),
                                static_cast<Eigen::Index>(t.row_size()));
  Eigen::MatrixXd c = m;
  c.rowwise() -= c.colwise().mean();
  return c;
}

}  // namespace

double linear_cka(const BasicTensor<double>& x, const BasicTensor<double>& y) {
  if (x.rows() != y.rows()) throw ConfigError("linear_cka: feature matrices have different row counts");
  if (x.rows() < 2) throw ConfigError("linear_cka: need at least 2 samples");
  const Eigen::MatrixXd xc = centered(x);
  const Eigen::MatrixXd yc = centered(y);
  const Eigen::MatrixXd cross = yc.transpose() * xc;
  const Eigen::MatrixXd xx = xc.transpose() * xc;
  const Eigen::MatrixXd yy = yc.transpose() * yc;
  const double sx = xx.squaredNorm();
  const double sy = yy.squaredNorm();
  if (!(sx > 0.0) || !(sy > 0.0)) {
    std::cerr << "warning: linear_cka on zero-variance features, returning 0\n";
    return 0.0;
  }
  const double cka = cross.squaredNorm() / std::sqrt(sx * sy);
  return std::clamp(cka, 0.0, 1.0);
}

std::vector<SimilarityMatrix> cross_client_layer_similarity(const Architecture& arch, std::span<const ParamSet> models,
                                                            const Tensor& probe, std::span<const int> layers) {
  if (models.size() < 2) throw ConfigError("cross_client_layer_similarity: need at least 2 models");
  for (int l : layers) {
    if (l < 1 || l > arch.num_units()) {
      throw ConfigError("cross_client_layer_similarity: layer " + std::to_string(l) + " is not a captured unit (1.." +
                        std::to_string(arch.num_units()) + ")");
    }
  }
  std::vector<std::map<int, BasicTensor<double>>> feats;
  feats.reserve(models.size());
  for (const auto& m : models) {
    auto fr = forward(arch, m, probe, layers);
    std::map<int, BasicTensor<double>> per_layer;
    for (auto& [unit, act] : fr.activations) per_layer.emplace(unit, act.cast<double>());
    feats.push_back(std::move(per_layer));
  }
  const std::size_t n = models.size();
  std::vector<SimilarityMatrix> out;
  for (int l : layers) {
    SimilarityMatrix sm;
    sm.layer = l;
    sm.n_clients = n;
    sm.values.assign(n * n, 0.0);
    double off = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      sm.values[a * n + a] = 1.0;
      for (std::size_t b = a + 1; b < n; ++b) {
        const double v = linear_cka(feats[a].at(l), feats[b].at(l));
        sm.values[a * n + b] = sm.values[b * n + a] = v;
        off += v;
      }
    }
    sm.mean_off_diagonal = off / static_cast<double>(n * (n - 1) / 2);
    out.push_back(std::move(sm));
  }
  return out;
}

ConvergenceTracker::ConvergenceTracker(double delta, int window)
    : delta_(delta), window_(window), best_(-std::numeric_limits<double>::infinity()) {
  if (window < 1) throw ConfigError("early_stop.window must be >= 1");
  if (!(delta >= 0.0)) throw ConfigError("early_stop.delta must be >= 0");
}

bool ConvergenceTracker::update(int round, double mean_acc) {
  if (mean_acc > best_ + delta_) {
    best_ = mean_acc;
    last_improved_ = round;
  }
  return round - last_improved_ >= window_;
}

int rounds_to_convergence(std::span<const double> mean_accs, double delta, int window) {
  ConvergenceTracker tracker(delta, window);
  for (std::size_t r = 0; r < mean_accs.size(); ++r) {
    if (tracker.update(static_cast<int>(r + 1), mean_accs[r])) break;
  }
  return tracker.rounds_to_convergence();
}

}  // namespace flayer
