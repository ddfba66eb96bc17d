#include "flayer/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "flayer/rng.hpp"
#include "json.hpp"

namespace flayer {

using nlohmann::json;

namespace {

/// Reads one JSON object, remembering which keys were consumed so leftovers
/// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void require(const std::string& key) const {
    if (!j_.contains(key)) {
      throw ConfigError((path_.empty() ? std::string("config") : path_) + ": missing required field '" + field(key) + "'");
    }
  }

  template <typename T>
  void read(const std::string& key, T& out, bool required = false) {
    if (required) require(key);
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) fail(field(key), "expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) fail(field(key), "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) fail(field(key), "expected a non-negative integer");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) fail(field(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) fail(field(key), "expected a string");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      fail(field(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(field(it.key()), "unknown key");
    }
  }

  [[noreturn]] static void fail(const std::string& field, const std::string& msg) { throw ConfigError(field + ": " + msg); }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& field, const std::string& msg) {
  if (!ok) ObjectReader::fail(field, msg);
}

int num_units(const ArchitectureConfig& a) {
  return a.kind == "mlp" ? static_cast<int>(a.hidden.size()) + 1 : static_cast<int>(a.channels.size()) + 2;
}

ExperimentConfig from_json(const json& doc, const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  cfg.base_dir = base_dir;
  ObjectReader root(doc, "");
  root.read("name", cfg.name);
  root.require("dataset");
  root.require("architecture");
  root.require("strategy");

  {
    ObjectReader r(root.child("dataset"), "dataset");
    r.read("kind", cfg.dataset.kind, true);
    auto& d = cfg.dataset;
    if (d.kind == "synthetic") {
      r.read("classes", d.classes);
      r.read("dims", d.dims);
      r.read("samples_per_class", d.samples_per_class);
      r.read("class_separation", d.class_separation);
      check(d.classes >= 2, "dataset.classes", "must be >= 2");
      check(d.dims >= 2, "dataset.dims", "must be >= 2");
      check(d.samples_per_class >= 1, "dataset.samples_per_class", "must be >= 1");
      check(d.class_separation >= 0.0, "dataset.class_separation", "must be >= 0");
    } else if (d.kind == "csv") {
      r.read("path", d.path, true);
      r.read("label_column", d.label_column);
      r.read("feature_columns", d.feature_columns);
    } else if (d.kind == "idx") {
      r.read("images", d.images, true);
      r.read("labels", d.labels, true);
    } else {
      ObjectReader::fail("dataset.kind", "must be one of synthetic, csv, idx (got '" + d.kind + "')");
    }
    r.finish();
  }

  if (root.has("partition")) {
    ObjectReader r(root.child("partition"), "partition");
    r.read("n_clients", cfg.partition.n_clients);
    r.read("beta", cfg.partition.beta);
    r.read("min_per_client", cfg.partition.min_per_client);
    r.read("max_retries", cfg.partition.max_retries);
    r.read("test_fraction", cfg.partition.test_fraction);
    r.finish();
  }

  {
    ObjectReader r(root.child("architecture"), "architecture");
    auto& a = cfg.architecture;
    r.read("kind", a.kind, true);
    if (a.kind == "mlp") {
      r.read("hidden", a.hidden);
      check(!a.hidden.empty(), "architecture.hidden", "needs at least one hidden layer");
      for (int h : a.hidden) check(h > 0, "architecture.hidden", "sizes must be positive");
    } else if (a.kind == "cnn") {
      r.read("input", a.input, true);
      r.read("channels", a.channels);
      r.read("kernel", a.kernel);
      r.read("padding", a.padding);
      int hidden = 32;
      r.read("hidden", hidden);
      a.hidden = {hidden};
      check(a.input.size() == 3 && a.input[0] > 0 && a.input[1] > 0 && a.input[2] > 0, "architecture.input",
            "must be [channels, height, width] with positive entries");
      check(!a.channels.empty(), "architecture.channels", "needs at least one conv layer");
      for (int c : a.channels) check(c > 0, "architecture.channels", "must be positive");
      check(a.kernel >= 1, "architecture.kernel", "must be >= 1");
      check(a.padding == "same" || a.padding == "valid", "architecture.padding", "must be 'same' or 'valid'");
      check(hidden > 0, "architecture.hidden", "must be positive");
    } else {
      ObjectReader::fail("architecture.kind", "must be 'mlp' or 'cnn' (got '" + a.kind + "')");
    }
    r.finish();
  }

  {
    ObjectReader r(root.child("strategy"), "strategy");
    r.read("name", cfg.strategy.name, true);
    r.read("aggregation", cfg.strategy.toggles.aggregation);
    r.read("adaptive_lr", cfg.strategy.toggles.adaptive_lr);
    r.read("masking", cfg.strategy.toggles.masking);
    if (cfg.strategy.name == "fedavg" || cfg.strategy.name == "fedper") {
      check(cfg.strategy.toggles == FlayerToggles{}, "strategy",
            "aggregation/adaptive_lr/masking can only be disabled for strategy 'flayer'");
    } else if (cfg.strategy.name != "flayer") {
      ObjectReader::fail("strategy.name", "must be one of flayer, fedavg, fedper (got '" + cfg.strategy.name + "')");
    }
    r.finish();
  }

  root.read("head_size", cfg.head_size);
  root.read("base_lr", cfg.base_lr);
  root.read("batch_size", cfg.batch_size);
  root.read("local_epochs", cfg.local_epochs);
  root.read("join_ratio", cfg.join_ratio);
  root.read("max_rounds", cfg.max_rounds);
  if (root.has("early_stop")) {
    ObjectReader r(root.child("early_stop"), "early_stop");
    r.read("delta", cfg.early_stop_delta);
    r.read("window", cfg.early_stop_window);
    r.finish();
  }
  std::string aggregation = "mask-aware";
  root.read("aggregation", aggregation);
  if (aggregation == "mask-aware") {
    cfg.aggregation = AggregationMode::mask_aware;
  } else if (aggregation == "literal") {
    cfg.aggregation = AggregationMode::literal;
  } else {
    ObjectReader::fail("aggregation", "must be 'mask-aware' or 'literal'");
  }
  root.read("output_dir", cfg.output_dir);
  root.read("seeds", cfg.seeds);
  if (root.has("cka")) {
    ObjectReader r(root.child("cka"), "cka");
    r.read("enabled", cfg.cka.enabled);
    r.read("probe_size", cfg.cka.probe_size);
    r.read("layers", cfg.cka.layers);
    r.finish();
  }
  root.read("dump_payloads", cfg.dump_payloads);
  root.finish();

  const int units = num_units(cfg.architecture);
  check(!cfg.name.empty(), "name", "must not be empty");
  check(cfg.partition.n_clients >= 2, "partition.n_clients", "must be >= 2");
  check(cfg.partition.beta > 0.0, "partition.beta", "must be > 0");
  check(cfg.partition.max_retries >= 1, "partition.max_retries", "must be >= 1");
  check(cfg.partition.test_fraction > 0.0 && cfg.partition.test_fraction < 1.0, "partition.test_fraction",
        "must be in (0, 1)");
  check(cfg.batch_size >= 1, "batch_size", "must be >= 1");
  check(cfg.partition.min_per_client >= cfg.batch_size, "partition.min_per_client",
        "must be >= batch_size (" + std::to_string(cfg.batch_size) + ")");
  check(cfg.head_size >= 1 && cfg.head_size < units, "head_size",
        "must be in [1, " + std::to_string(units - 1) + "] for this architecture");
  check(cfg.base_lr > 0.0, "base_lr", "must be > 0");
  check(cfg.local_epochs >= 1, "local_epochs", "must be >= 1");
  check(cfg.join_ratio > 0.0 && cfg.join_ratio <= 1.0, "join_ratio", "must be in (0, 1]");
  check(cfg.max_rounds >= 1, "max_rounds", "must be >= 1");
  check(cfg.early_stop_delta >= 0.0, "early_stop.delta", "must be >= 0");
  check(cfg.early_stop_window >= 1, "early_stop.window", "must be >= 1");
  check(!cfg.seeds.empty(), "seeds", "needs at least one seed");
  check(std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() == cfg.seeds.size(), "seeds",
        "must be distinct");
  check(cfg.cka.probe_size >= 2, "cka.probe_size", "must be >= 2");
  for (int l : cfg.cka.layers) check(l >= 1 && l <= units, "cka.layers", "entries must be in [1, " + std::to_string(units) + "]");
  check(!(cfg.strategy.name == "fedper" && cfg.aggregation == AggregationMode::literal), "aggregation",
        "fedper keeps heads out of the upload and needs 'mask-aware'");
  return cfg;
}

json to_json(const ExperimentConfig& cfg) {
  json doc;
  doc["name"] = cfg.name;
  const auto& d = cfg.dataset;
  json ds{{"kind", d.kind}};
  if (d.kind == "synthetic") {
    ds["classes"] = d.classes;
    ds["dims"] = d.dims;
    ds["samples_per_class"] = d.samples_per_class;
    ds["class_separation"] = d.class_separation;
  } else if (d.kind == "csv") {
    ds["path"] = d.path;
    ds["label_column"] = d.label_column;
    ds["feature_columns"] = d.feature_columns;
  } else {
    ds["images"] = d.images;
    ds["labels"] = d.labels;
  }
  doc["dataset"] = ds;
  doc["partition"] = {{"n_clients", cfg.partition.n_clients},
                      {"beta", cfg.partition.beta},
                      {"min_per_client", cfg.partition.min_per_client},
                      {"max_retries", cfg.partition.max_retries},
                      {"test_fraction", cfg.partition.test_fraction}};
  const auto& a = cfg.architecture;
  json arch{{"kind", a.kind}};
  if (a.kind == "mlp") {
    arch["hidden"] = a.hidden;
  } else {
    arch["input"] = a.input;
    arch["channels"] = a.channels;
    arch["kernel"] = a.kernel;
    arch["padding"] = a.padding;
    arch["hidden"] = a.hidden.empty() ? 32 : a.hidden.front();
  }
  doc["architecture"] = arch;
  json strat{{"name", cfg.strategy.name}};
  if (cfg.strategy.name == "flayer") {
    strat["aggregation"] = cfg.strategy.toggles.aggregation;
    strat["adaptive_lr"] = cfg.strategy.toggles.adaptive_lr;
    strat["masking"] = cfg.strategy.toggles.masking;
  }
  doc["strategy"] = strat;
  doc["head_size"] = cfg.head_size;
  doc["base_lr"] = cfg.base_lr;
  doc["batch_size"] = cfg.batch_size;
  doc["local_epochs"] = cfg.local_epochs;
  doc["join_ratio"] = cfg.join_ratio;
  doc["max_rounds"] = cfg.max_rounds;
  doc["early_stop"] = {{"delta", cfg.early_stop_delta}, {"window", cfg.early_stop_window}};
  doc["aggregation"] = cfg.aggregation == AggregationMode::literal ? "literal" : "mask-aware";
  doc["output_dir"] = cfg.output_dir;
  doc["seeds"] = cfg.seeds;
  doc["cka"] = {{"enabled", cfg.cka.enabled}, {"probe_size", cfg.cka.probe_size}, {"layers", cfg.cka.layers}};
  doc["dump_payloads"] = cfg.dump_payloads;
  return doc;
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: not valid JSON (") + e.what() + ")");
  }
}

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir) {
  return from_json(parse_json(json_text), base_dir);
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg = parse_config(ss.str(), path.parent_path());
  return overrides.empty() ? cfg : apply_overrides(cfg, overrides);
}

ExperimentConfig apply_overrides(const ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  json doc = to_json(cfg);
  for (const auto& assignment : overrides) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set '" + assignment + "': expected key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &doc;
    std::stringstream parts(key);
    std::string part, walked;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (std::size_t i = 0; i + 1 < path.size(); ++i) {
      walked += (walked.empty() ? "" : ".") + path[i];
      if (!node->contains(path[i])) throw ConfigError(walked + ": unknown key");
      node = &(*node)[path[i]];
      if (!node->is_object()) throw ConfigError(walked + ": is not an object");
    }
    (*node)[path.back()] = value;
  }
  return from_json(doc, cfg.base_dir);
}

std::string to_json_text(const ExperimentConfig& cfg, int indent) { return to_json(cfg).dump(indent); }

std::string config_hash(const ExperimentConfig& cfg) {
  json doc = to_json(cfg);
  doc.erase("output_dir");
  return hex16(fnv1a64(doc.dump()));
}

std::string data_hash(const ExperimentConfig& cfg) {
  const json doc = to_json(cfg);
  const json key{{"dataset", doc["dataset"]}, {"partition", doc["partition"]}, {"seeds", doc["seeds"]}};
  return hex16(fnv1a64(key.dump()));
}

Architecture build_architecture(const ExperimentConfig& cfg, std::size_t input_size, int num_classes) {
  const auto& a = cfg.architecture;
  const auto classes = static_cast<std::size_t>(num_classes);
  if (a.kind == "mlp") {
    return Architecture::mlp(input_size, std::vector<std::size_t>(a.hidden.begin(), a.hidden.end()), classes);
  }
  const auto c = static_cast<std::size_t>(a.input[0]), h = static_cast<std::size_t>(a.input[1]),
             w = static_cast<std::size_t>(a.input[2]);
  if (c * h * w != input_size) {
    throw ConfigError("architecture.input: " + std::to_string(c * h * w) + " values per sample, dataset has " +
                      std::to_string(input_size));
  }
  return Architecture::cnn(c, h, w, std::vector<std::size_t>(a.channels.begin(), a.channels.end()),
                           static_cast<std::size_t>(a.kernel), a.padding == "valid" ? Padding::valid : Padding::same,
                           static_cast<std::size_t>(a.hidden.front()), classes);
}

Strategy build_strategy(const ExperimentConfig& cfg) {
  if (cfg.strategy.name == "fedavg") return fedavg_strategy();
  if (cfg.strategy.name == "fedper") return fedper_strategy(cfg.head_size);
  return flayer_strategy(cfg.strategy.toggles, cfg.head_size);
}

}  // namespace flayer
