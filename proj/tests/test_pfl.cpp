#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "flayer/errors.hpp"
#include "flayer/pfl.hpp"
#include "flayer/rng.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace flayer;
using flayer::test::bit_equal;
using flayer::test::make_client_data;
using flayer::test::random_params;
using flayer::test::sort_oracle;

namespace {

LrPolicy eq4_policy() { return adaptive_lr; }

ParamSet filled(const ParamSet& like, float v) {
  ParamSet p = like;
  for (auto& u : p.units)
    for (std::size_t j = 0; j < u.size(); ++j) u.at(j) = v;
  return p;
}

// Builds a ParamSet of L dense units, unit i holding n_i weights (1 x n_i) and one bias.
std::pair<Architecture, ParamSet> flat_units(const std::vector<std::size_t>& widths) {
  std::vector<LayerSpec> layers;
  std::size_t in = widths.front();
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::size_t out = i + 1 < widths.size() ? widths[i + 1] : 1;
    layers.push_back(LayerSpec::dense(in, out));
    in = out;
  }
  Architecture arch(layers, "flat");
  return {arch, arch.init_params(0)};
}

std::vector<float> flat(const UnitTensors<float>& u) {
  std::vector<float> v(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) v[j] = u.at(j);
  return v;
}

}  // namespace

TEST_CASE("head init examples") {
  const auto arch = Architecture::mlp(3, {4, 4}, 2);
  const auto local = random_params(arch, 1), global = random_params(arch, 2);

  SUBCASE("prev_acc 0 returns the global model") {
    CHECK(bit_equal(init_local_model(local, global, 0.0, 1), global));
    CHECK(bit_equal(init_local_model(local, global, 0.0, 2), global));
  }
  SUBCASE("prev_acc 1 keeps the local head") {
    const auto out = init_local_model(local, global, 1.0, 2);
    CHECK(out.units[0] == global.units[0]);
    CHECK(out.units[1] == local.units[1]);
    CHECK(out.units[2] == local.units[2]);
  }
  SUBCASE("midpoint") {
    const auto out = init_local_model(filled(local, 2.0f), filled(global, 4.0f), 0.5, 1);
    CHECK(out.units[2].weight[0] == 3.0f);
    CHECK(out.units[1].weight[0] == 4.0f);
  }
  SUBCASE("head size must leave a base") {
    CHECK_THROWS_AS(init_local_model(local, global, 0.5, 3), ConfigError);
    CHECK_THROWS_AS(init_local_model(local, global, 0.5, 0), ConfigError);
    CHECK_THROWS_AS(init_local_model(local, global, 1.5, 1), ConfigError);
  }
}

TEST_CASE("head init is convex and leaves the base untouched") {
  const auto arch = Architecture::mlp(5, {6, 7, 4}, 3);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto local = random_params(arch, rng(), 2.0f), global = random_params(arch, rng(), 2.0f);
    const double a = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const int s = 1 + trial % 3;
    const auto out = init_local_model(local, global, a, s);
    const int base = arch.num_units() - s;
    for (int i = 0; i < arch.num_units(); ++i) {
      const auto& u = out.units[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < u.size(); ++j) {
        const float g = global.units[static_cast<std::size_t>(i)].at(j);
        const float l = local.units[static_cast<std::size_t>(i)].at(j);
        if (i < base) {
          CHECK(std::memcmp(&u.at(j), &g, sizeof(float)) == 0);
        } else {
          CHECK(u.at(j) >= std::min(l, g));
          CHECK(u.at(j) <= std::max(l, g));
        }
      }
    }
  }
}

TEST_CASE("head init weights are complementary") {
  // With local == global every weighting returns the same values.
  const auto arch = Architecture::mlp(4, {5}, 3);
  const auto p = random_params(arch, 9);
  for (double a : {0.0, 0.1, 0.37, 0.5, 0.9, 1.0}) CHECK(bit_equal(init_local_model(p, p, a, 1), p));
}

TEST_CASE("adaptive lr examples") {
  CHECK(adaptive_lr(0.1, 4, 4, 1.0) == doctest::Approx(0.16931).epsilon(1e-5));
  CHECK(std::abs(adaptive_lr(0.1, 4, 4, 1.0) - 0.1 * (1.0 + std::log(2.0))) < 1e-12);
  CHECK(adaptive_lr(0.1, 2, 4, 1e12) == doctest::Approx(0.1).epsilon(1e-9));
  const double top = adaptive_lr(0.1, 5, 5, 0.3);
  CHECK(adaptive_lr(0.1, 1, 5, 0.3) == doctest::Approx(0.1 + (top - 0.1) / 5).epsilon(1e-12));
  CHECK(std::isfinite(adaptive_lr(0.1, 1, 3, 0.0)));
  CHECK(adaptive_lr(0.1, 1, 3, 0.0) == doctest::Approx(0.1 * (1 + std::log(1 + 1e8) / 3)));
}

TEST_CASE("adaptive lr monotonicity") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> g(1e-4, 1e3);
  for (int trial = 0; trial < 200; ++trial) {
    const double base = 0.001 + 0.1 * std::generate_canonical<double, 53>(rng);
    const double norm = g(rng);
    const int L = 2 + trial % 9;
    for (int i = 1; i < L; ++i) CHECK(adaptive_lr(base, i, L, norm) < adaptive_lr(base, i + 1, L, norm));
    for (int i = 1; i <= L; ++i) {
      CHECK(adaptive_lr(base, i, L, norm) > adaptive_lr(base, i, L, norm * 1.5));
      CHECK(adaptive_lr(base, i, L, norm) >= base);
    }
  }
}

TEST_CASE("upload fraction examples") {
  CHECK(upload_fraction(1, 4) == 0.25);
  CHECK(upload_fraction(1, 20) == 0.1);
  CHECK(upload_fraction(7, 7) == 1.0);
  CHECK(upload_fraction(1, 100) == 0.1);
  CHECK(upload_count(1, 3, 144) == 48);
  CHECK(upload_count(2, 3, 136) == 91);
  CHECK(upload_count(1, 20, 5) == 1);
  CHECK(upload_count(3, 3, 17) == 17);
  CHECK(upload_count(1, 10, 10) == 1);
  CHECK(upload_count(3, 10, 10) == 3);
}

TEST_CASE("mask picks the single changed entry") {
  // Ten units so the first gets UP = 0.1; its weight row has 9 entries plus one bias.
  std::vector<LayerSpec> layers = {LayerSpec::dense(9, 1)};
  for (int i = 1; i < 10; ++i) layers.push_back(LayerSpec::dense(1, 1));
  const Architecture arch(layers, "ten");
  const auto before = arch.init_params(0);
  auto after = before;
  after.units[0].at(9) += 5.0f;
  const auto m = build_mask(before, after);
  CHECK(m.popcount(0) == 1);
  CHECK(m.units[0][9] == 1);
  CHECK(m.popcount(9) == 2);
  CHECK(std::all_of(m.units[9].begin(), m.units[9].end(), [](auto b) { return b == 1; }));
}

TEST_CASE("mask equals the full-sort oracle on 100 random layers") {
  std::mt19937_64 rng(42);
  int layers_checked = 0;
  while (layers_checked < 100) {
    const int L = 2 + static_cast<int>(rng() % 9);
    std::vector<std::size_t> widths;
    for (int i = 0; i < L; ++i) widths.push_back(1 + rng() % 40);
    auto [arch, before] = flat_units(widths);
    auto after = before;
    // Quantized deltas so ties are common.
    const bool quantize = rng() % 2 == 0;
    for (auto& u : after.units)
      for (std::size_t j = 0; j < u.size(); ++j) {
        float d = std::uniform_real_distribution<float>(-1.0f, 1.0f)(rng);
        if (quantize) d = std::round(d * 3.0f) / 3.0f;
        u.at(j) += d;
      }
    const auto mask = build_mask(before, after);
    for (int i = 0; i < L && layers_checked < 100; ++i, ++layers_checked) {
      const auto& bu = before.units[static_cast<std::size_t>(i)];
      const auto& au = after.units[static_cast<std::size_t>(i)];
      const std::size_t n = bu.size();
      const auto k = flayer::test::expected_upload(i + 1, L, n);
      CHECK(mask.popcount(static_cast<std::size_t>(i)) == k);
      CHECK(mask.units[static_cast<std::size_t>(i)] == sort_oracle(flat(bu), flat(au), k));
      // No dropped entry moved strictly more than a kept one.
      double min_kept = 1e300, max_dropped = -1.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = std::abs(double(au.at(j)) - bu.at(j));
        if (mask.units[static_cast<std::size_t>(i)][j]) min_kept = std::min(min_kept, d);
        else max_dropped = std::max(max_dropped, d);
      }
      CHECK(max_dropped <= min_kept);
    }
  }
}

TEST_CASE("mask density tracks the upload fraction") {
  const auto arch = Architecture::mlp(13, {11, 7, 5}, 3);
  const auto before = random_params(arch, 1), after = random_params(arch, 2);
  const auto m = build_mask(before, after);
  for (int i = 1; i <= arch.num_units(); ++i) {
    const double n = static_cast<double>(before.units[static_cast<std::size_t>(i - 1)].size());
    const double density = static_cast<double>(m.popcount(static_cast<std::size_t>(i - 1))) / n;
    CHECK(std::abs(density - upload_fraction(i, arch.num_units())) <= 1.0 / n);
  }
  CHECK(m.popcount(3) == before.units[3].size());
}

TEST_CASE("apply_mask examples and idempotence") {
  const auto arch = Architecture::mlp(6, {5}, 4);
  const auto p = random_params(arch, 3);
  CHECK(bit_equal(apply_mask(p, MaskSet::ones(p)), p));
  const auto zero = apply_mask(p, MaskSet::zeros(p));
  for (const auto& u : zero.units)
    for (std::size_t j = 0; j < u.size(); ++j) CHECK((u.at(j) == 0.0f && !std::signbit(u.at(j))));

  const auto m = build_mask(random_params(arch, 4), p);
  const auto once = apply_mask(p, m);
  CHECK(bit_equal(apply_mask(once, m), once));
  for (std::size_t i = 0; i < p.units.size(); ++i)
    for (std::size_t j = 0; j < p.units[i].size(); ++j)
      CHECK(once.units[i].at(j) == (m.units[i][j] ? p.units[i].at(j) : 0.0f));

  MaskSet wrong = m;
  wrong.units[0].pop_back();
  CHECK_THROWS_AS(apply_mask(p, wrong), AggregationError);
}

TEST_CASE("local_train leaves a model with zero gradient untouched") {
  // Identity base and a head with an enormous margin: softmax is exactly one-hot in float.
  const Architecture arch({LayerSpec::dense(2, 2), LayerSpec::dense(2, 2)}, "margin");
  ParamSet p = arch.init_params(0);
  p.units[0].weight = Tensor({2, 2}, {1, 0, 0, 1});
  p.units[0].bias = Tensor({2}, {0, 0});
  p.units[1].weight = Tensor({2, 2}, {500, -500, -500, 500});
  p.units[1].bias = Tensor({2}, {0, 0});
  Dataset train;
  train.num_classes = 2;
  std::vector<float> x;
  for (int i = 0; i < 20; ++i) {
    x.push_back(i % 2 == 0 ? 1.0f : 0.0f);
    x.push_back(i % 2 == 0 ? 0.0f : 1.0f);
    train.labels.push_back(i % 2);
  }
  train.inputs = Tensor({20, 2}, x);
  ClientState state{.client_id = 0, .local_params = p, .prev_accuracy = 0.0,
                    .data = make_client_data(0, train, train), .head_size = 1};
  const auto out = local_train(arch, state, p, {.epochs = 2, .batch_size = 3, .base_lr = 0.1, .batch_seed = 1}, eq4_policy());
  CHECK(bit_equal(out, p));
}

TEST_CASE("single full batch step matches a hand-computed gradient") {
  // dense(3,4) -> relu -> dense(4,2), mean cross-entropy, rates from Eq. 4.
  const auto arch = Architecture::mlp(3, {4}, 2);
  const auto p = random_params(arch, 6, 0.8f);
  const auto x = flayer::test::random_tensor({5, 3}, 7);
  const std::vector<int> y = {0, 1, 1, 0, 1};
  Dataset train{x, y, 2, "hand"};

  const auto& W1 = p.units[0].weight;
  const auto& b1 = p.units[0].bias;
  const auto& W2 = p.units[1].weight;
  const auto& b2 = p.units[1].bias;
  std::vector<double> gW1(12, 0.0), gb1(4, 0.0), gW2(8, 0.0), gb2(2, 0.0);
  for (std::size_t n = 0; n < 5; ++n) {
    double z[4], h[4], o[2];
    for (int i = 0; i < 4; ++i) {
      z[i] = b1[i];
      for (int j = 0; j < 3; ++j) z[i] += double(W1[i * 3 + j]) * x[n * 3 + j];
      h[i] = z[i] > 0 ? z[i] : 0.0;
    }
    for (int c = 0; c < 2; ++c) {
      o[c] = b2[c];
      for (int i = 0; i < 4; ++i) o[c] += double(W2[c * 4 + i]) * h[i];
    }
    const double m = std::max(o[0], o[1]);
    const double e0 = std::exp(o[0] - m), e1 = std::exp(o[1] - m);
    const double d[2] = {(e0 / (e0 + e1) - (y[n] == 0)) / 5.0, (e1 / (e0 + e1) - (y[n] == 1)) / 5.0};
    for (int c = 0; c < 2; ++c) {
      gb2[c] += d[c];
      for (int i = 0; i < 4; ++i) gW2[c * 4 + i] += d[c] * h[i];
    }
    for (int i = 0; i < 4; ++i) {
      if (z[i] <= 0) continue;
      const double dh = d[0] * W2[0 * 4 + i] + d[1] * W2[1 * 4 + i];
      gb1[i] += dh;
      for (int j = 0; j < 3; ++j) gW1[i * 3 + j] += dh * x[n * 3 + j];
    }
  }
  auto norm = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (double v : a) s += v * v;
    for (double v : b) s += v * v;
    return std::sqrt(s);
  };
  const double base = 0.05;
  const double r1 = base * (1.0 + std::log(1.0 + 1.0 / norm(gW1, gb1)) * 0.5);
  const double r2 = base * (1.0 + std::log(1.0 + 1.0 / norm(gW2, gb2)) * 1.0);

  ClientState state{.client_id = 0, .local_params = p, .prev_accuracy = 0.0,
                    .data = make_client_data(0, train, train), .head_size = 1};
  const auto out = local_train(arch, state, p, {.epochs = 1, .batch_size = 5, .base_lr = base, .batch_seed = 3}, eq4_policy());
  for (int k = 0; k < 12; ++k) CHECK(std::abs(out.units[0].weight[k] - (W1[k] - r1 * gW1[k])) < 1e-6);
  for (int k = 0; k < 4; ++k) CHECK(std::abs(out.units[0].bias[k] - (b1[k] - r1 * gb1[k])) < 1e-6);
  for (int k = 0; k < 8; ++k) CHECK(std::abs(out.units[1].weight[k] - (W2[k] - r2 * gW2[k])) < 1e-6);
  for (int k = 0; k < 2; ++k) CHECK(std::abs(out.units[1].bias[k] - (b2[k] - r2 * gb2[k])) < 1e-6);
}

TEST_CASE("one local epoch lowers the train loss") {
  int descended = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ds = generate_synthetic({.classes = 4, .dims = 10, .samples_per_class = 60, .class_separation = 3.0, .seed = seed});
    const auto arch = Architecture::mlp(10, {16, 8}, 4);
    const auto p = arch.init_params(seed + 100);
    ClientState state{.client_id = 0, .local_params = p, .prev_accuracy = 0.0,
                      .data = make_client_data(0, ds, ds), .head_size = 1};
    const auto out = local_train(arch, state, p, {.epochs = 1, .batch_size = 10, .base_lr = 0.01, .batch_seed = seed}, eq4_policy());
    const Batch all{ds.inputs, ds.labels};
    if (backward(arch, out, all).loss <= backward(arch, p, all).loss) ++descended;
  }
  CHECK(descended >= 9);
}

TEST_CASE("a client round is bit-reproducible") {
  const auto ds = generate_synthetic({.classes = 3, .dims = 6, .samples_per_class = 40, .class_separation = 2.0, .seed = 1});
  const auto arch = Architecture::mlp(6, {8, 8}, 3);
  const auto global = arch.init_params(derive_seed(7, "init"));
  ClientState state{.client_id = 4, .local_params = random_params(arch, 2), .prev_accuracy = 0.6,
                    .data = make_client_data(4, ds, ds), .head_size = 1};
  auto round = [&] {
    const auto init = init_local_model(state.local_params, global, state.prev_accuracy, state.head_size);
    const auto trained = local_train(arch, state, init,
                                     {.epochs = 1, .batch_size = 10, .base_lr = 0.01, .batch_seed = derive_seed(7, "batching", 3, 4)},
                                     eq4_policy());
    return apply_mask(trained, build_mask(init, trained));
  };
  CHECK(bit_equal(round(), round()));
}

TEST_CASE("accuracy examples") {
  const auto ds = generate_synthetic({.classes = 4, .dims = 5, .samples_per_class = 1000, .class_separation = 2.0, .seed = 2});
  const auto arch = Architecture::mlp(5, {7}, 4);

  SUBCASE("untrained model sits at chance") {
    const auto noise = generate_synthetic({.classes = 4, .dims = 5, .samples_per_class = 1000, .class_separation = 0.0, .seed = 2});
    CHECK(std::abs(accuracy(arch, arch.init_params(3), noise) - 0.25) <= 0.05);
  }
  SUBCASE("matches an argmax-and-count oracle") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto p = random_params(arch, s);
      const auto logits = forward(arch, p, ds.inputs).logits;
      std::size_t correct = 0;
      for (std::size_t r = 0; r < ds.size(); ++r) {
        int best = 0;
        for (int c = 1; c < 4; ++c)
          if (logits[r * 4 + c] > logits[r * 4 + best]) best = c;
        correct += best == ds.labels[r];
      }
      CHECK(accuracy(arch, p, ds) == static_cast<double>(correct) / ds.size());
    }
  }
  SUBCASE("perfect model scores 1") {
    // Labels defined by the model's own predictions.
    const auto p = random_params(arch, 11);
    Dataset relabeled = ds;
    const auto logits = forward(arch, p, ds.inputs).logits;
    for (std::size_t r = 0; r < ds.size(); ++r) {
      auto row = logits.row(r);
      relabeled.labels[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    CHECK(accuracy(arch, p, relabeled) == 1.0);
  }
}

TEST_CASE("prev accuracy comes from the train split") {
  const auto train = generate_synthetic({.classes = 2, .dims = 3, .samples_per_class = 30, .class_separation = 3.0, .seed = 1});
  Dataset test = train;
  for (auto& y : test.labels) y = 1 - y;
  const auto arch = Architecture::mlp(3, {4}, 2);
  const auto p = arch.init_params(0);
  ClientState state{.client_id = 0, .local_params = p, .data = make_client_data(0, train, test)};
  CHECK(update_prev_accuracy(arch, state, p) == accuracy(arch, p, train));
  CHECK(state.prev_accuracy == accuracy(arch, p, train));
}
