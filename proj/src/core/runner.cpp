#include "flayer/runner.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "flayer/rng.hpp"
#include "json.hpp"

namespace flayer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path resolve(const ExperimentConfig& cfg, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || cfg.base_dir.empty() ? path : cfg.base_dir / path;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(path.string() + ": cannot write");
  return out;
}

json similarity_json(const std::vector<SimilarityMatrix>& mats) {
  json arr = json::array();
  for (const auto& m : mats) {
    json rows = json::array();
    for (std::size_t a = 0; a < m.n_clients; ++a) {
      json row = json::array();
      for (std::size_t b = 0; b < m.n_clients; ++b) row.push_back(m.at(a, b));
      rows.push_back(row);
    }
    arr.push_back({{"layer", m.layer}, {"mean_off_diagonal", m.mean_off_diagonal}, {"values", rows}});
  }
  return arr;
}

}  // namespace

Dataset load_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto& d = cfg.dataset;
  if (d.kind == "synthetic") {
    return generate_synthetic({d.classes, d.dims, d.samples_per_class, d.class_separation, derive_seed(seed, "data")});
  }
  if (d.kind == "csv") return load_csv(resolve(cfg, d.path), CsvSchema{d.feature_columns, d.label_column});
  return load_idx(resolve(cfg, d.images), resolve(cfg, d.labels));
}

ExperimentSetup make_setup(const ExperimentConfig& cfg, std::uint64_t seed, unsigned workers) {
  const Dataset ds = load_dataset(cfg, seed);
  PartitionSpec spec;
  spec.n_clients = cfg.partition.n_clients;
  spec.beta = cfg.partition.beta;
  spec.seed = derive_seed(seed, "partition");
  spec.min_per_client = cfg.partition.min_per_client;
  spec.max_retries = cfg.partition.max_retries;
  spec.test_fraction = cfg.partition.test_fraction;
  auto parts = partition_dirichlet(ds, spec);

  ExperimentSetup setup{build_architecture(cfg, ds.feature_size(), ds.num_classes), build_strategy(cfg), {}, {}, cfg.max_rounds,
                        cfg.early_stop_delta, cfg.early_stop_window, seed};
  for (auto& p : parts) setup.clients.push_back(std::make_shared<const ClientDataset>(std::move(p)));
  setup.round.local_epochs = cfg.local_epochs;
  setup.round.batch_size = cfg.batch_size;
  setup.round.base_lr = cfg.base_lr;
  setup.round.join_ratio = cfg.join_ratio;
  setup.round.aggregation = cfg.aggregation;
  setup.round.workers = workers;
  return setup;
}

Tensor make_probe(const ExperimentSetup& setup, std::size_t size, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> rows;
  for (std::size_t c = 0; c < setup.clients.size(); ++c) {
    for (std::size_t r = 0; r < setup.clients[c]->test.size(); ++r) rows.emplace_back(c, r);
  }
  Rng rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(std::min(size, rows.size()));
  const std::size_t width = setup.arch.input_size();
  std::vector<float> values;
  values.reserve(rows.size() * width);
  for (auto [c, r] : rows) {
    auto row = setup.clients[c]->test.inputs.row(r);
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({rows.size(), width}, std::move(values));
}

std::string round_log_line(std::uint64_t seed, const RoundReport& report) {
  json clients = json::array();
  for (const auto& c : report.per_client) {
    clients.push_back({{"id", c.client_id},
                       {"test_acc", c.test_acc},
                       {"test_loss", c.test_loss},
                       {"train_acc", c.train_acc},
                       {"m_k", c.m_k}});
  }
  const json line{{"seed", seed},
                  {"round", report.round},
                  {"sampled", report.sampled},
                  {"mean_acc", report.mean_acc},
                  {"weighted_loss", report.weighted_loss},
                  {"payload_bytes", report.payload_bytes},
                  {"uploaded_per_layer", report.uploaded_per_layer},
                  {"clients", clients}};
  return line.dump();
}

RunOutcome run(const ExperimentConfig& cfg, const RunOptions& options) {
  fs::path root = cfg.output_dir;
  if (const char* env = std::getenv("FLAYER_OUTPUT_ROOT"); env && *env) root = env;
  if (options.output_root) root = *options.output_root;

  RunOutcome outcome;
  const std::string hash = config_hash(cfg);
  outcome.dir = root / (cfg.name + "-" + hash.substr(0, 8));
  fs::create_directories(outcome.dir);
  open_out(outcome.dir / "config.json") << to_json_text(cfg) << '\n';

  json manifest{{"config_hash", hash}, {"data_hash", data_hash(cfg)}, {"name", cfg.name},
                {"strategy", cfg.strategy.name}, {"log_version", 1}};
  json seed_streams = json::array();

  std::ofstream timing = open_out(outcome.dir / "timing.csv");
  timing << "seed,round,elapsed_s\n";

  for (std::uint64_t seed : cfg.seeds) {
    const ExperimentSetup setup = make_setup(cfg, seed, options.workers);
    if (manifest.find("architecture") == manifest.end()) {
      manifest["architecture"] = setup.arch.describe();
      manifest["layers"] = setup.arch.num_units();
      manifest["unit_sizes"] = setup.arch.unit_sizes();
    }
    seed_streams.push_back({{"seed", seed},
                            {"data", derive_seed(seed, "data")},
                            {"partition", derive_seed(seed, "partition")},
                            {"init", derive_seed(seed, "init")},
                            {"probe", derive_seed(seed, "probe")},
                            {"sampling", "derive_seed(seed, \"sampling\", round)"},
                            {"batching", "derive_seed(seed, \"batching\", round, client)"}});

    std::ofstream log = open_out(outcome.dir / ("rounds_seed" + std::to_string(seed) + ".jsonl"));
    const fs::path dump_dir = outcome.dir / "payloads" / ("seed" + std::to_string(seed));
    if (cfg.dump_payloads) fs::create_directories(dump_dir);

    double bytes = 0.0, wall = 0.0;
    const ExperimentResult result = run_experiment(setup, [&](const RoundOutput& out) {
      log << round_log_line(seed, out.report) << '\n';
      timing << seed << ',' << out.report.round << ',' << fmt(out.report.elapsed_s) << '\n';
      bytes += static_cast<double>(out.report.payload_bytes);
      wall += out.report.elapsed_s;
      if (cfg.dump_payloads) {
        for (const auto& p : out.payloads) {
          write_payload_file(dump_dir / ("r" + std::to_string(p.round) + "_c" + std::to_string(p.client_id) + ".flyr"), p);
        }
      }
      if (options.on_round) options.on_round(seed, out.report);
    });

    if (cfg.cka.enabled) {
      std::vector<int> layers = cfg.cka.layers;
      if (layers.empty()) {
        for (int i = 1; i <= setup.arch.num_units(); ++i) layers.push_back(i);
      }
      const Tensor probe = make_probe(setup, static_cast<std::size_t>(cfg.cka.probe_size), derive_seed(seed, "probe"));
      const std::vector<ParamSet> initial(result.clients.size(), result.initial_global);
      std::vector<ParamSet> trained;
      for (const auto& c : result.clients) trained.push_back(c.local_params);
      const json cka{{"seed", seed},
                     {"probe_size", probe.rows()},
                     {"initial", similarity_json(cross_client_layer_similarity(setup.arch, initial, probe, layers))},
                     {"final", similarity_json(cross_client_layer_similarity(setup.arch, trained, probe, layers))}};
      open_out(outcome.dir / ("cka_seed" + std::to_string(seed) + ".json")) << cka.dump(2) << '\n';
    }

    SeedSummary s;
    s.seed = seed;
    s.rounds_run = static_cast<int>(result.reports.size());
    s.rounds_to_convergence = result.rounds_to_convergence;
    s.final_mean_acc = result.reports.back().mean_acc;
    for (const auto& r : result.reports) s.best_mean_acc = std::max(s.best_mean_acc, r.mean_acc);
    s.payload_bytes_per_round = bytes / static_cast<double>(result.reports.size());
    s.wall_s = wall;
    outcome.seeds.push_back(s);
  }
  manifest["seeds"] = seed_streams;
  open_out(outcome.dir / "manifest.json") << manifest.dump(2) << '\n';

  RunSummary& sum = outcome.summary;
  sum.config_hash = hash;
  sum.data_hash = data_hash(cfg);
  sum.name = cfg.name;
  sum.strategy = cfg.strategy.name;
  sum.n_seeds = outcome.seeds.size();
  for (const auto& s : outcome.seeds) {
    sum.rounds_to_convergence += s.rounds_to_convergence;
    sum.final_mean_acc += s.final_mean_acc;
    sum.total_wall_s += s.wall_s;
    sum.payload_bytes_per_round += s.payload_bytes_per_round;
  }
  const auto n = static_cast<double>(sum.n_seeds);
  sum.rounds_to_convergence /= n;
  sum.final_mean_acc /= n;
  sum.payload_bytes_per_round /= n;
  if (sum.n_seeds > 1) {
    double var = 0.0;
    for (const auto& s : outcome.seeds) var += (s.final_mean_acc - sum.final_mean_acc) * (s.final_mean_acc - sum.final_mean_acc);
    sum.final_acc_std = std::sqrt(var / (n - 1.0));
  }

  std::ofstream seeds_csv = open_out(outcome.dir / "seeds.csv");
  seeds_csv << "seed,rounds_run,rounds_to_convergence,final_mean_acc,best_mean_acc,wall_s,payload_bytes_per_round\n";
  for (const auto& s : outcome.seeds) {
    seeds_csv << s.seed << ',' << s.rounds_run << ',' << s.rounds_to_convergence << ',' << fmt(s.final_mean_acc) << ','
              << fmt(s.best_mean_acc) << ',' << fmt(s.wall_s) << ',' << fmt(s.payload_bytes_per_round) << '\n';
  }
  std::ofstream summary_csv = open_out(outcome.dir / "summary.csv");
  summary_csv << "config_hash,data_hash,name,strategy,seeds,rounds_to_convergence,final_mean_acc,final_acc_std,"
                 "total_wall_s,payload_bytes_per_round\n"
              << sum.config_hash << ',' << sum.data_hash << ',' << sum.name << ',' << sum.strategy << ',' << sum.n_seeds
              << ',' << fmt(sum.rounds_to_convergence) << ',' << fmt(sum.final_mean_acc) << ','
              << fmt(sum.final_acc_std) << ',' << fmt(sum.total_wall_s) << ',' << fmt(sum.payload_bytes_per_round)
              << '\n';
  return outcome;
}

namespace {

std::map<std::string, std::string> read_summary(const fs::path& dir) {
  std::ifstream in(dir / "summary.csv");
  if (!in) throw Error(dir.string() + ": no summary.csv (is this a completed run?)");
  std::string header, values;
  std::getline(in, header);
  std::getline(in, values);
  std::map<std::string, std::string> out;
  std::stringstream hs(header), vs(values);
  std::string h, v;
  while (std::getline(hs, h, ',') && std::getline(vs, v, ',')) out[h] = v;
  return out;
}

double number(const std::map<std::string, std::string>& row, const std::string& key, const fs::path& dir) {
  auto it = row.find(key);
  if (it == row.end()) throw Error(dir.string() + "/summary.csv: missing column '" + key + "'");
  return std::stod(it->second);
}

}  // namespace

ComparisonTable compare(std::span<const fs::path> run_dirs) {
  if (run_dirs.size() < 2) throw ConfigError("compare: need at least 2 run directories");
  ComparisonTable table;
  for (const auto& dir : run_dirs) {
    const auto row = read_summary(dir);
    const std::string data = row.count("data_hash") ? row.at("data_hash") : "";
    if (table.rows.empty()) {
      table.data_hash = data;
    } else if (data != table.data_hash) {
      throw IncompatibleRunsError("compare: " + dir.string() + " has data_hash " + data + ", " +
                                  run_dirs.front().string() + " has " + table.data_hash);
    }
    ComparisonRow r;
    r.run = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
    r.strategy = row.count("strategy") ? row.at("strategy") : "";
    r.config_hash = row.count("config_hash") ? row.at("config_hash") : "";
    r.rounds_to_convergence = number(row, "rounds_to_convergence", dir);
    r.final_mean_acc = number(row, "final_mean_acc", dir);
    r.final_acc_std = number(row, "final_acc_std", dir);
    r.payload_bytes_per_round = number(row, "payload_bytes_per_round", dir);
    if (!table.rows.empty()) {
      const auto& base = table.rows.front();
      r.delta_acc = r.final_mean_acc - base.final_mean_acc;
      r.delta_rounds = r.rounds_to_convergence - base.rounds_to_convergence;
      r.delta_bytes = r.payload_bytes_per_round - base.payload_bytes_per_round;
    }
    table.rows.push_back(r);
  }
  return table;
}

std::string ComparisonTable::csv() const {
  std::ostringstream os;
  os << "run,strategy,config_hash,rounds_to_convergence,final_mean_acc,final_acc_std,payload_bytes_per_round,"
        "delta_acc,delta_rounds,delta_bytes\n";
  for (const auto& r : rows) {
    os << r.run << ',' << r.strategy << ',' << r.config_hash << ',' << fmt(r.rounds_to_convergence) << ','
       << fmt(r.final_mean_acc) << ',' << fmt(r.final_acc_std) << ',' << fmt(r.payload_bytes_per_round) << ','
       << fmt(r.delta_acc) << ',' << fmt(r.delta_rounds) << ',' << fmt(r.delta_bytes) << '\n';
  }
  return os.str();
}

std::string ComparisonTable::text() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %-8s %8s %16s %9s %12s %9s\n", "run", "strategy", "#iter", "acc (%)", "d acc",
                "bytes/round", "d iter");
  os << line;
  for (const auto& r : rows) {
    char acc[32];
    std::snprintf(acc, sizeof acc, "%.2f+-%.2f", 100.0 * r.final_mean_acc, 100.0 * r.final_acc_std);
    std::snprintf(line, sizeof line, "%-28s %-8s %8.1f %16s %+9.2f %12.0f %+9.1f\n", r.run.c_str(), r.strategy.c_str(),
                  r.rounds_to_convergence, acc, 100.0 * r.delta_acc, r.payload_bytes_per_round, r.delta_rounds);
    os << line;
  }
  return os.str();
}

}  // namespace flayer
