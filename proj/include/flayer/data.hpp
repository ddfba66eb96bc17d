#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flayer/nn.hpp"

namespace flayer {

struct Dataset {
  Tensor inputs;  // N x features (image data: N x C*H*W, row-major)
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t feature_size() const noexcept { return inputs.row_size(); }

  /// Rows at `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
  Batch batch(std::span<const std::size_t> indices) const;
  /// Throws ConfigError when labels and inputs disagree or a label is out of range.
  void validate() const;
};

struct SyntheticSpec {
  int classes = 2;
  int dims = 2;
  int samples_per_class = 100;
  double class_separation = 1.0;
  std::uint64_t seed = 0;
};

/// Gaussian blobs with unit covariance. Class means are random directions
/// rescaled so the closest pair is exactly `class_separation` apart.
Dataset generate_synthetic(const SyntheticSpec& spec);

struct PartitionSpec {
  int n_clients = 20;
  double beta = 0.1;
  std::uint64_t seed = 0;
  /// Minimum train-split size of every client.
  int min_per_client = 20;
  int max_retries = 1000;
  double test_fraction = 0.25;
};

struct ClientDataset {
  int client_id = 0;
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_indices;  // rows of the source dataset
  std::vector<std::size_t> test_indices;

  std::size_t m_k() const noexcept { return train.size(); }
};

/// Non-IID split: for every class, client proportions are drawn from
/// Dir(beta) and the class's shuffled samples are cut accordingly. Each
/// client's pool is then split train/test stratified by class. Draws are
/// repeated until every client reaches `min_per_client` train samples.
std::vector<ClientDataset> partition_dirichlet(const Dataset& ds, const PartitionSpec& spec);

/// Shannon entropy (nats) of the label histogram of `labels`.
double label_entropy(std::span<const int> labels, int num_classes);

struct CsvSchema {
  /// Empty selects every column except the label.
  std::vector<std::string> feature_columns;
  std::string label_column = "label";
};

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);
/// Header "f0,...,f{d-1},label".
void save_csv(const std::filesystem::path& path, const Dataset& ds);

/// IDX pair (images magic 0x00000803, labels magic 0x00000801). Pixels are
/// scaled to [0,1]; rows are C=1 x H x W.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
/// Writes pixels as round(v * 255); `rows * cols` must equal the feature size.
void save_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& ds,
              std::size_t rows, std::size_t cols);

}  // namespace flayer
