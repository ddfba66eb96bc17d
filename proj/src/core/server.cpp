#include "flayer/server.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "flayer/rng.hpp"

namespace flayer {

std::vector<int> sample_clients(int n, double rho, std::uint64_t seed) {
  if (n < 1) throw ConfigError("sample_clients: no clients");
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("join_ratio must be in (0, 1]");
  const int count = std::clamp(static_cast<int>(std::lround(rho * n)), 1, n);
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  if (count < n) {
    Rng rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(static_cast<std::size_t>(count));
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

ParamSet aggregate(std::span<const UploadPayload> payloads, const ParamSet& prev_global, AggregationMode mode) {
  if (payloads.empty()) throw AggregationError("aggregate: no payloads");
  bool any = false;
  double total = 0.0;
  for (const auto& p : payloads) {
    if (!p.params.congruent(prev_global) || !p.mask.congruent(prev_global)) {
      throw AggregationError("aggregate: payload of client " + std::to_string(p.client_id) +
                             " does not match the global model");
    }
    for (std::size_t i = 0; i < p.mask.units.size() && !any; ++i) any = p.mask.popcount(i) > 0;
    total += static_cast<double>(p.m_k);
  }
  if (!any) throw AggregationError("aggregate: every payload is empty");
  if (!(total > 0.0)) throw AggregationError("aggregate: payloads carry no training samples");

  ParamSet out = prev_global;
  for (std::size_t i = 0; i < out.units.size(); ++i) {
    auto& unit = out.units[i];
    for (std::size_t j = 0; j < unit.size(); ++j) {
      double num = 0.0, den = 0.0;
      for (const auto& p : payloads) {
        const double w = static_cast<double>(p.m_k);
        if (mode == AggregationMode::literal) {
          const double v = p.mask.units[i][j] ? static_cast<double>(p.params.units[i].at(j)) : 0.0;
          num += w / total * v;
        } else if (p.mask.units[i][j]) {
          num += w * static_cast<double>(p.params.units[i].at(j));
          den += w;
        }
      }
      if (mode == AggregationMode::literal) {
        unit.at(j) = static_cast<float>(num);
      } else if (den > 0.0) {
        unit.at(j) = static_cast<float>(num / den);
      }
    }
  }
  return out;
}

void parallel_for(std::size_t count, unsigned workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(count);
  const unsigned threads = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(count)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

template <typename F>
auto with_context(const std::string& context, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(context + ": " + e.what(), e.layer());
  } catch (const ConfigError& e) {
    throw ConfigError(context + ": " + e.what());
  } catch (const AggregationError& e) {
    throw AggregationError(context + ": " + e.what());
  }
}

}  // namespace

RoundOutput run_round(const GlobalState& global, std::vector<ClientState>& clients, const Architecture& arch,
                      const Strategy& strategy, const RoundConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  const int round = global.round + 1;
  const std::string where = "round " + std::to_string(round);

  RoundOutput out;
  out.report.round = round;
  out.report.sampled = sample_clients(static_cast<int>(clients.size()), cfg.join_ratio,
                                      derive_seed(global.seed, "sampling", static_cast<std::uint64_t>(round)));
  const auto& sampled = out.report.sampled;
  out.payloads.resize(sampled.size());

  parallel_for(sampled.size(), cfg.workers, [&](std::size_t s) {
    ClientState& state = clients[static_cast<std::size_t>(sampled[s])];
    with_context(where + ", client " + std::to_string(state.client_id), [&] {
      const ParamSet init = strategy.init_local(state.local_params, global.params, state);
      LocalTrainOptions opts;
      opts.epochs = cfg.local_epochs;
      opts.batch_size = cfg.batch_size;
      opts.base_lr = cfg.base_lr;
      opts.batch_seed = derive_seed(global.seed, "batching", static_cast<std::uint64_t>(round),
                                    static_cast<std::uint64_t>(state.client_id));
      ParamSet trained = local_train(arch, state, init, opts, strategy.lr_policy);
      Upload up = strategy.upload_transform(init, trained);
      update_prev_accuracy(arch, state, trained);
      state.local_params = std::move(trained);
      out.payloads[s] = UploadPayload{state.client_id, round, std::move(up.params), std::move(up.mask),
                                      state.data->m_k()};
      return 0;
    });
  });

  out.global.round = round;
  out.global.seed = global.seed;
  out.global.params = with_context(where, [&] { return aggregate(out.payloads, global.params, cfg.aggregation); });

  out.report.uploaded_per_layer.assign(global.params.units.size(), 0);
  for (const auto& p : out.payloads) {
    out.report.payload_bytes += encoded_size(p);
    for (std::size_t i = 0; i < p.mask.units.size(); ++i) out.report.uploaded_per_layer[i] += p.mask.popcount(i);
  }

  out.report.per_client.resize(clients.size());
  parallel_for(clients.size(), cfg.workers, [&](std::size_t k) {
    const ClientState& state = clients[k];
    with_context(where + ", evaluating client " + std::to_string(state.client_id), [&] {
      const ParamSet model = strategy.init_local(state.local_params, out.global.params, state);
      const Evaluation ev = evaluate(arch, model, state.data->test);
      out.report.per_client[k] = ClientMetrics{state.client_id, ev.accuracy, ev.loss, state.prev_accuracy,
                                               state.data->m_k()};
      return 0;
    });
  });
  summarize(out.report);
  out.report.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

ExperimentResult run_experiment(const ExperimentSetup& setup, const RoundObserver& observer) {
  if (setup.clients.size() < 2) throw ConfigError("run_experiment: need at least 2 clients");
  if (setup.max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
  if (setup.strategy.head_size >= setup.arch.num_units()) {
    throw ConfigError("head_size " + std::to_string(setup.strategy.head_size) + " must be below the layer count " +
                      std::to_string(setup.arch.num_units()));
  }
  for (const auto& c : setup.clients) {
    if (!c || c->test.size() == 0 || c->train.size() == 0) {
      throw ConfigError("run_experiment: every client needs non-empty train and test splits");
    }
    if (c->train.feature_size() != setup.arch.input_size()) {
      throw ConfigError("run_experiment: data has " + std::to_string(c->train.feature_size()) +
                        " features, architecture expects " + std::to_string(setup.arch.input_size()));
    }
  }

  ExperimentResult result;
  result.initial_global = setup.arch.init_params(derive_seed(setup.seed, "init"));
  result.global = GlobalState{0, result.initial_global, setup.seed};
  for (std::size_t k = 0; k < setup.clients.size(); ++k) {
    result.clients.push_back(ClientState{static_cast<int>(k), result.initial_global, 0.0, setup.clients[k],
                                         setup.strategy.head_size});
  }

  ConvergenceTracker tracker(setup.early_stop_delta, setup.early_stop_window);
  for (int t = 1; t <= setup.max_rounds; ++t) {
    RoundOutput out = run_round(result.global, result.clients, setup.arch, setup.strategy, setup.round);
    if (observer) observer(out);
    const bool stop = tracker.update(out.report.round, out.report.mean_acc);
    result.global = std::move(out.global);
    result.reports.push_back(std::move(out.report));
    if (stop) {
      result.stopped_early = t < setup.max_rounds;
      break;
    }
  }
  result.rounds_to_convergence = tracker.rounds_to_convergence();
  for (const auto& state : result.clients) {
    result.personalized.push_back(setup.strategy.init_local(state.local_params, result.global.params, state));
  }
  return result;
}

}  // namespace flayer
