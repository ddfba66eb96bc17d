#pragma once

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "flayer/data.hpp"
#include "flayer/nn.hpp"
#include "flayer/pfl.hpp"

namespace flayer::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline ParamSet random_params(const Architecture& arch, std::uint64_t seed, float scale = 1.0f) {
  ParamSet p = arch.init_params(seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::uniform_real_distribution<float> u(-scale, scale);
  for (auto& unit : p.units) {
    for (std::size_t j = 0; j < unit.size(); ++j) unit.at(j) = u(rng);
  }
  return p;
}

inline std::vector<int> random_labels(std::size_t n, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> out(n);
  for (auto& y : out) y = u(rng);
  return out;
}

inline Batch random_batch(std::size_t n, std::size_t features, int classes, std::uint64_t seed) {
  return Batch{random_tensor({n, features}, seed), random_labels(n, classes, seed + 1)};
}

inline std::shared_ptr<const ClientDataset> make_client_data(int id, Dataset train, Dataset test) {
  auto c = std::make_shared<ClientDataset>();
  c->client_id = id;
  c->train = std::move(train);
  c->test = std::move(test);
  return c;
}

inline bool bit_equal(const ParamSet& a, const ParamSet& b) {
  if (!a.congruent(b)) return false;
  for (std::size_t i = 0; i < a.units.size(); ++i) {
    for (std::size_t j = 0; j < a.units[i].size(); ++j) {
      const float x = a.units[i].at(j), y = b.units[i].at(j);
      if (std::memcmp(&x, &y, sizeof(float)) != 0) return false;
    }
  }
  return true;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("flayer-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace flayer::test
