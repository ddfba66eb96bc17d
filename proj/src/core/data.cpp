#include "flayer/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "flayer/rng.hpp"

namespace flayer {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  const std::size_t w = feature_size();
  Shape shape = inputs.shape();
  shape[0] = indices.size();
  std::vector<float> values;
  values.reserve(indices.size() * w);
  std::vector<int> out_labels;
  out_labels.reserve(indices.size());
  for (std::size_t idx : indices) {
    auto row = inputs.row(idx);
    values.insert(values.end(), row.begin(), row.end());
    out_labels.push_back(labels[idx]);
  }
  return Dataset{Tensor(std::move(shape), std::move(values)), std::move(out_labels), num_classes, name};
}

Batch Dataset::batch(std::span<const std::size_t> indices) const {
  Dataset sub = subset(indices);
  return Batch{std::move(sub.inputs), std::move(sub.labels)};
}

void Dataset::validate() const {
  if (inputs.rows() != labels.size()) {
    throw ConfigError("dataset '" + name + "': " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(inputs.rows()) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ConfigError("dataset '" + name + "': label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    }
  }
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic: classes must be >= 2");
  if (spec.dims < 2) throw ConfigError("synthetic: dims must be >= 2");
  if (spec.samples_per_class < 1) throw ConfigError("synthetic: samples_per_class must be >= 1");
  if (!(spec.class_separation >= 0.0)) throw ConfigError("synthetic: class_separation must be >= 0");

  const auto c_n = static_cast<std::size_t>(spec.classes);
  const auto d = static_cast<std::size_t>(spec.dims);
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> means(c_n * d);
  for (double& m : means) m = normal(rng);
  double closest = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < c_n; ++a) {
    for (std::size_t b = a + 1; b < c_n; ++b) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) sq += (means[a * d + j] - means[b * d + j]) * (means[a * d + j] - means[b * d + j]);
      closest = std::min(closest, std::sqrt(sq));
    }
  }
  const double scale = spec.class_separation == 0.0 ? 0.0 : spec.class_separation / closest;
  for (double& m : means) m *= scale;

  const std::size_t n = c_n * static_cast<std::size_t>(spec.samples_per_class);
  std::vector<float> values;
  values.reserve(n * d);
  std::vector<int> labels;
  labels.reserve(n);
  for (std::size_t c = 0; c < c_n; ++c) {
    for (int s = 0; s < spec.samples_per_class; ++s) {
      for (std::size_t j = 0; j < d; ++j) values.push_back(static_cast<float>(means[c * d + j] + normal(rng)));
      labels.push_back(static_cast<int>(c));
    }
  }
  return Dataset{Tensor({n, d}, std::move(values)), std::move(labels), spec.classes, "synthetic"};
}

namespace {

std::vector<double> sample_dirichlet(std::size_t k, double beta, Rng& rng) {
  std::gamma_distribution<double> gamma(beta, 1.0);
  std::vector<double> p(k);
  for (double& v : p) v = gamma(rng);
  return p;
}

}  // namespace

std::vector<ClientDataset> partition_dirichlet(const Dataset& ds, const PartitionSpec& spec) {
  ds.validate();
  if (spec.n_clients < 2) throw ConfigError("partition: n_clients must be >= 2");
  if (!(spec.beta > 0.0) || !std::isfinite(spec.beta)) throw ConfigError("partition: beta must be > 0");
  if (spec.min_per_client < 1) throw ConfigError("partition: min_per_client must be >= 1");
  if (!(spec.test_fraction >= 0.0 && spec.test_fraction < 1.0)) {
    throw ConfigError("partition: test_fraction must be in [0, 1)");
  }
  const auto k_n = static_cast<std::size_t>(spec.n_clients);
  const std::size_t total = ds.size();
  if (total < k_n * static_cast<std::size_t>(spec.min_per_client)) {
    throw PartitionError("partition: " + std::to_string(total) + " samples cannot give " +
                         std::to_string(spec.n_clients) + " clients min_per_client=" +
                         std::to_string(spec.min_per_client) + " each");
  }

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < total; ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  Rng rng(spec.seed);
  // Clients already holding an average share get no further classes; this
  // keeps small-beta draws feasible without changing their skew.
  const double fair_share = static_cast<double>(total) / static_cast<double>(k_n);

  for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
    std::vector<std::vector<std::size_t>> pools(k_n);
    for (const auto& members : by_class) {
      if (members.empty()) continue;
      std::vector<std::size_t> idx = members;
      std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<double> p = sample_dirichlet(k_n, spec.beta, rng);
      double sum = 0.0;
      for (std::size_t j = 0; j < k_n; ++j) {
        if (static_cast<double>(pools[j].size()) >= fair_share) p[j] = 0.0;
        sum += p[j];
      }
      if (!(sum > 0.0)) {
        // Every gamma draw underflowed (tiny beta): the class goes to one eligible client.
        std::vector<std::size_t> eligible;
        for (std::size_t j = 0; j < k_n; ++j) {
          if (static_cast<double>(pools[j].size()) < fair_share) eligible.push_back(j);
        }
        if (eligible.empty()) {
          eligible.resize(k_n);
          std::iota(eligible.begin(), eligible.end(), std::size_t{0});
        }
        std::fill(p.begin(), p.end(), 0.0);
        p[eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)]] = 1.0;
        sum = 1.0;
      }
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t j = 0; j < k_n; ++j) {
        cum += p[j] / sum;
        const std::size_t end =
            j + 1 == k_n ? idx.size()
                         : std::min(idx.size(), static_cast<std::size_t>(cum * static_cast<double>(idx.size())));
        for (std::size_t s = start; s < std::max(start, end); ++s) pools[j].push_back(idx[s]);
        start = std::max(start, end);
      }
    }

    std::vector<ClientDataset> clients(k_n);
    bool feasible = true;
    for (std::size_t j = 0; j < k_n && feasible; ++j) {
      std::map<int, std::vector<std::size_t>> per_class;
      for (std::size_t i : pools[j]) per_class[ds.labels[i]].push_back(i);
      std::vector<std::size_t> train, test;
      for (auto& [label, members] : per_class) {
        const auto n_test = static_cast<std::size_t>(std::lround(static_cast<double>(members.size()) * spec.test_fraction));
        test.insert(test.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_test));
        train.insert(train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_test), members.end());
      }
      if (train.size() < static_cast<std::size_t>(spec.min_per_client)) {
        feasible = false;
        break;
      }
      std::sort(train.begin(), train.end());
      std::sort(test.begin(), test.end());
      ClientDataset& cd = clients[j];
      cd.client_id = static_cast<int>(j);
      cd.train = ds.subset(train);
      cd.test = ds.subset(test);
      cd.train.name = ds.name + "/client" + std::to_string(j) + "/train";
      cd.test.name = ds.name + "/client" + std::to_string(j) + "/test";
      cd.train_indices = std::move(train);
      cd.test_indices = std::move(test);
    }
    if (feasible) return clients;
  }
  throw PartitionError("partition: no draw gave every client min_per_client=" + std::to_string(spec.min_per_client) +
                       " train samples after " + std::to_string(spec.max_retries) + " retries (beta=" +
                       std::to_string(spec.beta) + ", n_clients=" + std::to_string(spec.n_clients) + ")");
}

double label_entropy(std::span<const int> labels, int num_classes) {
  if (labels.empty()) return 0.0;
  std::vector<double> counts(static_cast<std::size_t>(num_classes), 0.0);
  for (int y : labels) counts[static_cast<std::size_t>(y)] += 1.0;
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) {
      const double p = c / static_cast<double>(labels.size());
      h -= p * std::log(p);
    }
  }
  return h;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    fields.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

template <typename V>
bool parse_number(const std::string& s, V& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && !s.empty();
}

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(path.string() + ": cannot open");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > buf.size()) {
    throw IngestionError(path.string() + ": truncated header at offset " + std::to_string(offset));
  }
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IngestionError(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw IngestionError(path.string() + ":1: missing header row");
  const auto header = split_csv_line(line);

  auto column_of = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw IngestionError(path.string() + ":1: no column named '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t label_col = column_of(schema.label_column);
  std::vector<std::size_t> feature_cols;
  if (schema.feature_columns.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (c != label_col) feature_cols.push_back(c);
    }
  } else {
    for (const auto& name : schema.feature_columns) feature_cols.push_back(column_of(name));
  }
  if (feature_cols.empty()) throw IngestionError(path.string() + ":1: no feature columns");

  std::vector<float> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != header.size()) {
      throw IngestionError(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                           std::to_string(fields.size()));
    }
    for (std::size_t c : feature_cols) {
      double v = 0.0;
      if (!parse_number(fields[c], v)) throw IngestionError(where + ": column '" + header[c] + "' is not a number");
      values.push_back(static_cast<float>(v));
    }
    int y = 0;
    if (!parse_number(fields[label_col], y) || y < 0) {
      throw IngestionError(where + ": label '" + fields[label_col] + "' is not a non-negative integer");
    }
    labels.push_back(y);
  }
  if (labels.empty()) throw IngestionError(path.string() + ": no data rows");
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  const std::size_t n = labels.size();
  return Dataset{Tensor({n, feature_cols.size()}, std::move(values)), std::move(labels), std::max(classes, 2),
                 path.stem().string()};
}

void save_csv(const std::filesystem::path& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw IngestionError(path.string() + ": cannot write");
  const std::size_t d = ds.feature_size();
  for (std::size_t j = 0; j < d; ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[32];
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (float v : ds.inputs.row(r)) {
      std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
      out << buf << ',';
    }
    out << ds.labels[r] << '\n';
  }
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_all(images);
  const auto lab = read_all(labels);
  if (const auto magic = read_be32(img, 0, images); magic != 0x00000803) {
    throw IngestionError(images.string() + ": offset 0: magic number " + std::to_string(magic) +
                         " is not an image file (0x00000803)");
  }
  if (const auto magic = read_be32(lab, 0, labels); magic != 0x00000801) {
    throw IngestionError(labels.string() + ": offset 0: magic number " + std::to_string(magic) +
                         " is not a label file (0x00000801)");
  }
  const std::size_t n = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  const std::size_t n_labels = read_be32(lab, 4, labels);
  const std::size_t pixels = n * rows * cols;
  if (img.size() - 16 < pixels) {
    throw IngestionError(images.string() + ": offset 16: declared " + std::to_string(n) + " items of " +
                         std::to_string(rows * cols) + " bytes, payload holds " + std::to_string(img.size() - 16));
  }
  if (lab.size() - 8 < n_labels) {
    throw IngestionError(labels.string() + ": offset 8: declared " + std::to_string(n_labels) +
                         " labels, payload holds " + std::to_string(lab.size() - 8));
  }
  if (n_labels != n) {
    throw IngestionError(labels.string() + ": " + std::to_string(n_labels) + " labels for " + std::to_string(n) +
                         " images");
  }
  std::vector<float> values(pixels);
  for (std::size_t i = 0; i < pixels; ++i) values[i] = static_cast<float>(img[16 + i]) / 255.0f;
  std::vector<int> ys(n);
  int classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    ys[i] = lab[8 + i];
    classes = std::max(classes, ys[i] + 1);
  }
  return Dataset{Tensor({n, 1, rows, cols}, std::move(values)), std::move(ys), classes, images.stem().string()};
}

void save_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& ds,
              std::size_t rows, std::size_t cols) {
  if (rows * cols != ds.feature_size()) throw ConfigError("save_idx: rows*cols does not match feature size");
  std::ofstream img(images, std::ios::binary), lab(labels, std::ios::binary);
  if (!img || !lab) throw IngestionError("save_idx: cannot write output files");
  write_be32(img, 0x00000803);
  write_be32(img, static_cast<std::uint32_t>(ds.size()));
  write_be32(img, static_cast<std::uint32_t>(rows));
  write_be32(img, static_cast<std::uint32_t>(cols));
  for (float v : ds.inputs.values()) {
    const long q = std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
    img.put(static_cast<char>(q));
  }
  write_be32(lab, 0x00000801);
  write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lab.put(static_cast<char>(y));
}

}  // namespace flayer
