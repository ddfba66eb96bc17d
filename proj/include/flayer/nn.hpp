#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "flayer/tensor.hpp"

namespace flayer {

/// Weight and bias of one parameterized layer unit. Flat index j of a unit
/// runs over the weight values first, then the bias values.
template <typename T>
struct UnitTensors {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  std::size_t size() const noexcept { return weight.size() + bias.size(); }
  T& at(std::size_t j) noexcept { return j < weight.size() ? weight[j] : bias[j - weight.size()]; }
  const T& at(std::size_t j) const noexcept {
    return j < weight.size() ? weight[j] : bias[j - weight.size()];
  }

  friend bool operator==(const UnitTensors&, const UnitTensors&) = default;
};

struct ParamsTag {};
struct GradsTag {};

/// Ordered per-unit tensors, unit 1 nearest the input. Instantiated as the
/// model state (ParamSet) and as its gradient (LayerGradients).
template <typename T, typename Tag>
struct LayerTensorList {
  std::vector<UnitTensors<T>> units;

  int num_layers() const noexcept { return static_cast<int>(units.size()); }
  std::size_t num_values() const noexcept {
    std::size_t n = 0;
    for (const auto& u : units) n += u.size();
    return n;
  }

  template <typename U>
  LayerTensorList<U, Tag> cast() const {
    LayerTensorList<U, Tag> out;
    out.units.reserve(units.size());
    for (const auto& u : units) out.units.push_back({u.weight.template cast<U>(), u.bias.template cast<U>()});
    return out;
  }

  template <typename U, typename OtherTag>
  bool congruent(const LayerTensorList<U, OtherTag>& other) const noexcept {
    if (units.size() != other.units.size()) return false;
    for (std::size_t i = 0; i < units.size(); ++i) {
      if (units[i].weight.shape() != other.units[i].weight.shape() ||
          units[i].bias.shape() != other.units[i].bias.shape()) {
        return false;
      }
    }
    return true;
  }

  friend bool operator==(const LayerTensorList&, const LayerTensorList&) = default;
};

template <typename T>
using BasicParamSet = LayerTensorList<T, ParamsTag>;
template <typename T>
using BasicGradients = LayerTensorList<T, GradsTag>;

using ParamSet = BasicParamSet<float>;
using LayerGradients = BasicGradients<float>;

enum class LayerKind { dense, conv2d, relu, flatten };
enum class Padding { valid, same };

/// One entry of an architecture. Only dense and conv2d layers are units.
/// Activations travel as N x features rows; conv2d interprets a row as C x H x W.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Padding padding = Padding::same;

  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                          std::size_t height, std::size_t width, Padding padding);
  static LayerSpec relu(std::size_t features);
  static LayerSpec flatten(std::size_t features);

  bool parameterized() const noexcept { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
  Shape weight_shape() const;
  Shape bias_shape() const;
  std::size_t out_height() const noexcept;
  std::size_t out_width() const noexcept;
  std::size_t pad() const noexcept { return padding == Padding::same ? kernel / 2 : 0; }
};

class Architecture {
 public:
  Architecture(std::vector<LayerSpec> layers, std::string name);

  /// dense -> relu -> ... -> dense; L = hidden.size() + 1.
  static Architecture mlp(std::size_t inputs, const std::vector<std::size_t>& hidden,
                          std::size_t classes);
  /// conv -> relu per entry of conv_channels, flatten, dense(hidden) -> relu -> dense(classes).
  static Architecture cnn(std::size_t channels, std::size_t height, std::size_t width,
                          const std::vector<std::size_t>& conv_channels, std::size_t kernel,
                          Padding padding, std::size_t hidden, std::size_t classes);

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::string& name() const noexcept { return name_; }
  int num_units() const noexcept { return static_cast<int>(unit_layers_.size()); }
  std::size_t input_size() const noexcept { return layers_.front().in_features; }
  std::size_t num_classes() const noexcept { return layers_.back().out_features; }
  /// 0-based position in layers() of the 1-based unit index.
  std::size_t layer_of_unit(int unit) const;
  std::vector<std::size_t> unit_sizes() const;

  /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  ParamSet init_params(std::uint64_t seed) const;

  /// Throws ConfigError if params do not match the unit shapes.
  template <typename T, typename Tag>
  void check(const LayerTensorList<T, Tag>& params) const;

  std::string describe() const;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> unit_layers_;
  std::string name_;
};

struct Batch {
  Tensor inputs;
  std::vector<int> labels;
};

template <typename T>
struct ForwardResultT {
  BasicTensor<T> logits;
  /// Keyed by 1-based unit index; the unit's output after its following ReLU.
  std::map<int, BasicTensor<T>> activations;
};
using ForwardResult = ForwardResultT<float>;

template <typename T>
struct BackwardResultT {
  double loss = 0.0;
  BasicGradients<T> grads;
};
using BackwardResult = BackwardResultT<float>;

template <typename T>
ForwardResultT<T> forward_as(const Architecture& arch, const BasicParamSet<T>& params,
                             const BasicTensor<T>& inputs, std::span<const int> capture = {});

/// Mean softmax cross-entropy over the batch and its gradient.
template <typename T>
BackwardResultT<T> backward_as(const Architecture& arch, const BasicParamSet<T>& params,
                               const BasicTensor<T>& inputs, std::span<const int> labels);

inline ForwardResult forward(const Architecture& arch, const ParamSet& params, const Tensor& inputs,
                             std::span<const int> capture = {}) {
  return forward_as<float>(arch, params, inputs, capture);
}

inline BackwardResult backward(const Architecture& arch, const ParamSet& params, const Batch& batch) {
  return backward_as<float>(arch, params, batch.inputs, batch.labels);
}

/// Mean cross-entropy of logits (N x C) against labels, accumulated in double.
template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels);

/// out.units[i] = params.units[i] - lr[i] * grads.units[i].
ParamSet sgd_step(const ParamSet& params, const LayerGradients& grads, std::span<const double> lr);

/// L2 norm of each unit's gradient (weights and bias together).
std::vector<double> layer_grad_norms(const LayerGradients& grads);

/// Max relative error |analytic - central difference| / max(|central difference|, 1e-8)
/// over `samples_per_layer` randomly chosen entries of every unit. Runs in double.
double finite_difference_check(const Architecture& arch, const ParamSet& params, const Batch& batch,
                               std::size_t samples_per_layer, double eps, std::uint64_t seed = 0);

/// Same check against caller-supplied analytic gradients.
double finite_difference_check(const Architecture& arch, const ParamSet& params, const Batch& batch,
                               const BasicGradients<double>& analytic, std::size_t samples_per_layer,
                               double eps, std::uint64_t seed = 0);

}  // namespace flayer
