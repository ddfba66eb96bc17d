#include "flayer/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "flayer/rng.hpp"

namespace flayer {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_features = in;
  s.out_features = out;
  return s;
}

LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::size_t height, std::size_t width, Padding padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.height = height;
  s.width = width;
  s.padding = padding;
  s.in_features = in_channels * height * width;
  s.out_features = out_channels * s.out_height() * s.out_width();
  return s;
}

LayerSpec LayerSpec::relu(std::size_t features) {
  LayerSpec s;
  s.kind = LayerKind::relu;
  s.in_features = s.out_features = features;
  return s;
}

LayerSpec LayerSpec::flatten(std::size_t features) {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  s.in_features = s.out_features = features;
  return s;
}

Shape LayerSpec::weight_shape() const {
  switch (kind) {
    case LayerKind::dense:
      return {out_features, in_features};
    case LayerKind::conv2d:
      return {out_channels, in_channels, kernel, kernel};
    default:
      return {};
  }
}

Shape LayerSpec::bias_shape() const {
  switch (kind) {
    case LayerKind::dense:
      return {out_features};
    case LayerKind::conv2d:
      return {out_channels};
    default:
      return {};
  }
}

std::size_t LayerSpec::out_height() const noexcept {
  if (kind != LayerKind::conv2d) return 0;
  return height + 2 * pad() + 1 - kernel;
}

std::size_t LayerSpec::out_width() const noexcept {
  if (kind != LayerKind::conv2d) return 0;
  return width + 2 * pad() + 1 - kernel;
}

Architecture::Architecture(std::vector<LayerSpec> layers, std::string name)
    : layers_(std::move(layers)), name_(std::move(name)) {
  if (layers_.empty()) throw ConfigError("architecture: no layers");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const LayerSpec& l = layers_[k];
    const std::string where = "architecture layer " + std::to_string(k + 1);
    if (l.in_features == 0 || l.out_features == 0) throw ConfigError(where + ": zero-sized layer");
    if (k > 0 && layers_[k - 1].out_features != l.in_features) {
      throw ConfigError(where + ": expects " + std::to_string(l.in_features) + " inputs, previous layer yields " +
                        std::to_string(layers_[k - 1].out_features));
    }
    if (l.kind == LayerKind::conv2d) {
      if (l.kernel == 0 || l.in_channels == 0 || l.out_channels == 0) throw ConfigError(where + ": bad conv dims");
      if (l.padding == Padding::same && l.kernel % 2 == 0) {
        throw ConfigError(where + ": 'same' padding needs an odd kernel");
      }
      if (l.padding == Padding::valid && (l.kernel > l.height || l.kernel > l.width)) {
        throw ConfigError(where + ": kernel larger than input");
      }
    }
    if (l.parameterized()) unit_layers_.push_back(k);
  }
  if (unit_layers_.size() < 2) {
    throw ConfigError("architecture: need at least 2 parameterized layers to split base and head");
  }
  if (!layers_.back().parameterized()) throw ConfigError("architecture: last layer must produce logits");
}

Architecture Architecture::mlp(std::size_t inputs, const std::vector<std::size_t>& hidden,
                               std::size_t classes) {
  std::vector<LayerSpec> layers;
  std::size_t prev = inputs;
  for (std::size_t h : hidden) {
    layers.push_back(LayerSpec::dense(prev, h));
    layers.push_back(LayerSpec::relu(h));
    prev = h;
  }
  layers.push_back(LayerSpec::dense(prev, classes));
  return Architecture(std::move(layers), "mlp");
}

Architecture Architecture::cnn(std::size_t channels, std::size_t height, std::size_t width,
                               const std::vector<std::size_t>& conv_channels, std::size_t kernel,
                               Padding padding, std::size_t hidden, std::size_t classes) {
  std::vector<LayerSpec> layers;
  std::size_t c = channels, h = height, w = width;
  for (std::size_t oc : conv_channels) {
    LayerSpec conv = LayerSpec::conv2d(c, oc, kernel, h, w, padding);
    layers.push_back(conv);
    layers.push_back(LayerSpec::relu(conv.out_features));
    c = oc;
    h = conv.out_height();
    w = conv.out_width();
  }
  layers.push_back(LayerSpec::flatten(c * h * w));
  layers.push_back(LayerSpec::dense(c * h * w, hidden));
  layers.push_back(LayerSpec::relu(hidden));
  layers.push_back(LayerSpec::dense(hidden, classes));
  return Architecture(std::move(layers), "cnn");
}

std::size_t Architecture::layer_of_unit(int unit) const {
  if (unit < 1 || unit > num_units()) throw ConfigError("unit index " + std::to_string(unit) + " out of range");
  return unit_layers_[static_cast<std::size_t>(unit - 1)];
}

std::vector<std::size_t> Architecture::unit_sizes() const {
  std::vector<std::size_t> sizes;
  for (std::size_t k : unit_layers_) {
    sizes.push_back(shape_size(layers_[k].weight_shape()) + shape_size(layers_[k].bias_shape()));
  }
  return sizes;
}

ParamSet Architecture::init_params(std::uint64_t seed) const {
  Rng rng(seed);
  ParamSet params;
  for (std::size_t k : unit_layers_) {
    const LayerSpec& l = layers_[k];
    double fan_in = 0, fan_out = 0;
    if (l.kind == LayerKind::dense) {
      fan_in = static_cast<double>(l.in_features);
      fan_out = static_cast<double>(l.out_features);
    } else {
      fan_in = static_cast<double>(l.in_channels * l.kernel * l.kernel);
      fan_out = static_cast<double>(l.out_channels * l.kernel * l.kernel);
    }
    const float bound = static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
    std::uniform_real_distribution<float> dist(-bound, bound);
    Tensor weight(l.weight_shape());
    for (float& v : weight.values()) v = dist(rng);
    params.units.push_back({std::move(weight), Tensor(l.bias_shape())});
  }
  return params;
}

template <typename T, typename Tag>
void Architecture::check(const LayerTensorList<T, Tag>& params) const {
  if (params.units.size() != unit_layers_.size()) {
    throw ConfigError("parameter set has " + std::to_string(params.units.size()) + " units, architecture has " +
                      std::to_string(unit_layers_.size()));
  }
  for (std::size_t i = 0; i < unit_layers_.size(); ++i) {
    const LayerSpec& l = layers_[unit_layers_[i]];
    if (params.units[i].weight.shape() != l.weight_shape() || params.units[i].bias.shape() != l.bias_shape()) {
      throw ConfigError("unit " + std::to_string(i + 1) + ": expected weight " + shape_to_string(l.weight_shape()) +
                        ", got " + shape_to_string(params.units[i].weight.shape()));
    }
  }
}

template void Architecture::check(const LayerTensorList<float, ParamsTag>&) const;
template void Architecture::check(const LayerTensorList<float, GradsTag>&) const;
template void Architecture::check(const LayerTensorList<double, ParamsTag>&) const;
template void Architecture::check(const LayerTensorList<double, GradsTag>&) const;

std::string Architecture::describe() const {
  std::ostringstream os;
  os << name_ << '(';
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const LayerSpec& l = layers_[k];
    if (k) os << ' ';
    switch (l.kind) {
      case LayerKind::dense:
        os << "dense" << l.in_features << '-' << l.out_features;
        break;
      case LayerKind::conv2d:
        os << "conv" << l.in_channels << '-' << l.out_channels << 'k' << l.kernel;
        break;
      case LayerKind::relu:
        os << "relu";
        break;
      case LayerKind::flatten:
        os << "flatten";
        break;
    }
  }
  os << ')';
  return os.str();
}

namespace {

template <typename T>
void dense_forward(const LayerSpec& l, const UnitTensors<T>& p, const std::vector<T>& in, std::size_t n,
                   std::vector<T>& out) {
  const std::size_t ni = l.in_features, no = l.out_features;
  out.assign(n * no, T{});
  const T* w = p.weight.raw().data();
  const T* b = p.bias.raw().data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = in.data() + r * ni;
    for (std::size_t o = 0; o < no; ++o) {
      const T* wo = w + o * ni;
      double acc = static_cast<double>(b[o]);
      for (std::size_t i = 0; i < ni; ++i) acc += static_cast<double>(wo[i]) * static_cast<double>(x[i]);
      out[r * no + o] = static_cast<T>(acc);
    }
  }
}

template <typename T>
void dense_backward(const LayerSpec& l, const UnitTensors<T>& p, const std::vector<T>& in,
                    const std::vector<T>& dy, std::size_t n, UnitTensors<T>& grad, std::vector<T>& dx) {
  const std::size_t ni = l.in_features, no = l.out_features;
  std::vector<double> dw(ni * no, 0.0), db(no, 0.0), dxr(ni);
  dx.assign(n * ni, T{});
  const T* w = p.weight.raw().data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = in.data() + r * ni;
    std::fill(dxr.begin(), dxr.end(), 0.0);
    for (std::size_t o = 0; o < no; ++o) {
      const double g = static_cast<double>(dy[r * no + o]);
      if (g == 0.0) continue;
      db[o] += g;
      double* dwo = dw.data() + o * ni;
      const T* wo = w + o * ni;
      for (std::size_t i = 0; i < ni; ++i) {
        dwo[i] += g * static_cast<double>(x[i]);
        dxr[i] += g * static_cast<double>(wo[i]);
      }
    }
    for (std::size_t i = 0; i < ni; ++i) dx[r * ni + i] = static_cast<T>(dxr[i]);
  }
  grad.weight = BasicTensor<T>(l.weight_shape(), std::vector<T>(dw.begin(), dw.end()));
  grad.bias = BasicTensor<T>(l.bias_shape(), std::vector<T>(db.begin(), db.end()));
}

template <typename T>
void conv_forward(const LayerSpec& l, const UnitTensors<T>& p, const std::vector<T>& in, std::size_t n,
                  std::vector<T>& out) {
  const std::size_t ic_n = l.in_channels, oc_n = l.out_channels, k = l.kernel;
  const std::size_t h = l.height, wd = l.width, oh = l.out_height(), ow = l.out_width();
  const auto pad = static_cast<std::ptrdiff_t>(l.pad());
  out.assign(n * l.out_features, T{});
  const T* w = p.weight.raw().data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = in.data() + r * l.in_features;
    T* y = out.data() + r * l.out_features;
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = static_cast<double>(p.bias[oc]);
          for (std::size_t ic = 0; ic < ic_n; ++ic) {
            const T* wk = w + ((oc * ic_n + ic) * k) * k;
            const T* xc = x + ic * h * wd;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                acc += static_cast<double>(wk[ky * k + kx]) *
                       static_cast<double>(xc[static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)]);
              }
            }
          }
          y[(oc * oh + oy) * ow + ox] = static_cast<T>(acc);
        }
      }
    }
  }
}

template <typename T>
void conv_backward(const LayerSpec& l, const UnitTensors<T>& p, const std::vector<T>& in,
                   const std::vector<T>& dy, std::size_t n, UnitTensors<T>& grad, std::vector<T>& dx) {
  const std::size_t ic_n = l.in_channels, oc_n = l.out_channels, k = l.kernel;
  const std::size_t h = l.height, wd = l.width, oh = l.out_height(), ow = l.out_width();
  const auto pad = static_cast<std::ptrdiff_t>(l.pad());
  std::vector<double> dw(shape_size(l.weight_shape()), 0.0), db(oc_n, 0.0), dxr(l.in_features);
  dx.assign(n * l.in_features, T{});
  const T* w = p.weight.raw().data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = in.data() + r * l.in_features;
    const T* g = dy.data() + r * l.out_features;
    std::fill(dxr.begin(), dxr.end(), 0.0);
    for (std::size_t oc = 0; oc < oc_n; ++oc) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double go = static_cast<double>(g[(oc * oh + oy) * ow + ox]);
          if (go == 0.0) continue;
          db[oc] += go;
          for (std::size_t ic = 0; ic < ic_n; ++ic) {
            const std::size_t wbase = ((oc * ic_n + ic) * k) * k;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                const std::size_t xi = ic * h * wd + static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix);
                dw[wbase + ky * k + kx] += go * static_cast<double>(x[xi]);
                dxr[xi] += go * static_cast<double>(w[wbase + ky * k + kx]);
              }
            }
          }
        }
      }
    }
    for (std::size_t i = 0; i < l.in_features; ++i) dx[r * l.in_features + i] = static_cast<T>(dxr[i]);
  }
  grad.weight = BasicTensor<T>(l.weight_shape(), std::vector<T>(dw.begin(), dw.end()));
  grad.bias = BasicTensor<T>(l.bias_shape(), std::vector<T>(db.begin(), db.end()));
}

template <typename T>
bool finite(const std::vector<T>& v) {
  for (const T& x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

/// Runs the layers, keeping the input of every layer for the backward pass.
template <typename T>
std::vector<std::vector<T>> run_layers(const Architecture& arch, const BasicParamSet<T>& params,
                                       const BasicTensor<T>& inputs) {
  arch.check(params);
  const std::size_t n = inputs.rows();
  if (n == 0) throw ConfigError("forward: empty batch");
  if (inputs.row_size() != arch.input_size()) {
    throw ConfigError("forward: input has " + std::to_string(inputs.row_size()) + " features, architecture expects " +
                      std::to_string(arch.input_size()));
  }
  const auto& layers = arch.layers();
  std::vector<std::vector<T>> acts(layers.size() + 1);
  acts[0] = inputs.raw();
  std::size_t unit = 0;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const LayerSpec& l = layers[k];
    std::vector<T>& out = acts[k + 1];
    switch (l.kind) {
      case LayerKind::dense:
        dense_forward(l, params.units[unit++], acts[k], n, out);
        break;
      case LayerKind::conv2d:
        conv_forward(l, params.units[unit++], acts[k], n, out);
        break;
      case LayerKind::relu:
        out = acts[k];
        for (T& v : out) v = v > T{} ? v : T{};
        break;
      case LayerKind::flatten:
        out = acts[k];
        break;
    }
    if (!finite(out)) {
      throw NumericError("non-finite activation at layer " + std::to_string(k + 1), static_cast<int>(k + 1));
    }
  }
  return acts;
}

/// Position in the activation list holding the output of `unit` after its ReLU.
std::size_t capture_position(const Architecture& arch, int unit) {
  std::size_t k = arch.layer_of_unit(unit) + 1;
  const auto& layers = arch.layers();
  if (k < layers.size() && layers[k].kind == LayerKind::relu) ++k;
  return k;
}

}  // namespace

template <typename T>
ForwardResultT<T> forward_as(const Architecture& arch, const BasicParamSet<T>& params, const BasicTensor<T>& inputs,
                             std::span<const int> capture) {
  auto acts = run_layers(arch, params, inputs);
  const std::size_t n = inputs.rows();
  ForwardResultT<T> result;
  for (int unit : capture) {
    const std::size_t pos = capture_position(arch, unit);
    result.activations.emplace(unit, BasicTensor<T>({n, arch.layers()[pos - 1].out_features}, acts[pos]));
  }
  result.logits = BasicTensor<T>({n, arch.num_classes()}, std::move(acts.back()));
  return result;
}

template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows(), c = logits.row_size();
  if (labels.size() != n) throw ConfigError("cross_entropy: label count does not match batch");
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    auto row = logits.row(r);
    double mx = -INFINITY;
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (T v : row) z += std::exp(static_cast<double>(v) - mx);
    const auto y = static_cast<std::size_t>(labels[r]);
    if (labels[r] < 0 || y >= c) throw ConfigError("cross_entropy: label " + std::to_string(labels[r]) + " out of range");
    total += std::log(z) + mx - static_cast<double>(row[y]);
  }
  return total / static_cast<double>(n);
}

template <typename T>
BackwardResultT<T> backward_as(const Architecture& arch, const BasicParamSet<T>& params, const BasicTensor<T>& inputs,
                               std::span<const int> labels) {
  auto acts = run_layers(arch, params, inputs);
  const auto& layers = arch.layers();
  const std::size_t n = inputs.rows(), c = arch.num_classes();
  if (labels.size() != n) throw ConfigError("backward: " + std::to_string(labels.size()) + " labels for " +
                                            std::to_string(n) + " samples");

  BackwardResultT<T> result;
  const std::vector<T>& logits = acts.back();
  std::vector<T> dy(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw ConfigError("backward: label " + std::to_string(labels[r]) + " out of range");
    }
    const T* z = logits.data() + r * c;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(z[j]) - mx);
    const auto y = static_cast<std::size_t>(labels[r]);
    total += std::log(sum) + mx - static_cast<double>(z[y]);
    for (std::size_t j = 0; j < c; ++j) {
      const double prob = std::exp(static_cast<double>(z[j]) - mx) / sum;
      dy[r * c + j] = static_cast<T>((prob - (j == y ? 1.0 : 0.0)) / static_cast<double>(n));
    }
  }
  result.loss = total / static_cast<double>(n);
  if (!std::isfinite(result.loss)) {
    throw NumericError("non-finite loss at layer " + std::to_string(layers.size()), static_cast<int>(layers.size()));
  }

  result.grads.units.resize(params.units.size());
  std::size_t unit = params.units.size();
  std::vector<T> dx;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const LayerSpec& l = layers[k];
    switch (l.kind) {
      case LayerKind::dense:
        --unit;
        dense_backward(l, params.units[unit], acts[k], dy, n, result.grads.units[unit], dx);
        dy.swap(dx);
        break;
      case LayerKind::conv2d:
        --unit;
        conv_backward(l, params.units[unit], acts[k], dy, n, result.grads.units[unit], dx);
        dy.swap(dx);
        break;
      case LayerKind::relu:
        for (std::size_t i = 0; i < dy.size(); ++i) {
          if (!(acts[k][i] > T{})) dy[i] = T{};
        }
        break;
      case LayerKind::flatten:
        break;
    }
    if (!finite(dy)) {
      throw NumericError("non-finite gradient at layer " + std::to_string(k + 1), static_cast<int>(k + 1));
    }
  }
  return result;
}

template ForwardResultT<float> forward_as(const Architecture&, const BasicParamSet<float>&, const BasicTensor<float>&,
                                          std::span<const int>);
template ForwardResultT<double> forward_as(const Architecture&, const BasicParamSet<double>&,
                                           const BasicTensor<double>&, std::span<const int>);
template BackwardResultT<float> backward_as(const Architecture&, const BasicParamSet<float>&,
                                            const BasicTensor<float>&, std::span<const int>);
template BackwardResultT<double> backward_as(const Architecture&, const BasicParamSet<double>&,
                                             const BasicTensor<double>&, std::span<const int>);
template double cross_entropy(const BasicTensor<float>&, std::span<const int>);
template double cross_entropy(const BasicTensor<double>&, std::span<const int>);

ParamSet sgd_step(const ParamSet& params, const LayerGradients& grads, std::span<const double> lr) {
  if (!params.congruent(grads)) throw ConfigError("sgd_step: gradients are not shape-congruent with parameters");
  if (lr.size() != params.units.size()) {
    throw ConfigError("sgd_step: " + std::to_string(lr.size()) + " learning rates for " +
                      std::to_string(params.units.size()) + " layers");
  }
  ParamSet out = params;
  for (std::size_t i = 0; i < out.units.size(); ++i) {
    if (!(lr[i] > 0.0) || !std::isfinite(lr[i])) {
      throw ConfigError("sgd_step: learning rate of layer " + std::to_string(i + 1) + " must be positive");
    }
    auto step = [&](Tensor& p, const Tensor& g) {
      for (std::size_t j = 0; j < p.size(); ++j) {
        p[j] = static_cast<float>(static_cast<double>(p[j]) - lr[i] * static_cast<double>(g[j]));
      }
    };
    step(out.units[i].weight, grads.units[i].weight);
    step(out.units[i].bias, grads.units[i].bias);
  }
  return out;
}

std::vector<double> layer_grad_norms(const LayerGradients& grads) {
  std::vector<double> norms;
  norms.reserve(grads.units.size());
  for (const auto& u : grads.units) {
    double sq = 0.0;
    for (float v : u.weight.values()) sq += static_cast<double>(v) * v;
    for (float v : u.bias.values()) sq += static_cast<double>(v) * v;
    norms.push_back(std::sqrt(sq));
  }
  return norms;
}

double finite_difference_check(const Architecture& arch, const ParamSet& params, const Batch& batch,
                               std::size_t samples_per_layer, double eps, std::uint64_t seed) {
  const auto dparams = params.cast<double>();
  const auto inputs = batch.inputs.cast<double>();
  const auto analytic = backward_as<double>(arch, dparams, inputs, batch.labels).grads;
  return finite_difference_check(arch, params, batch, analytic, samples_per_layer, eps, seed);
}

double finite_difference_check(const Architecture& arch, const ParamSet& params, const Batch& batch,
                               const BasicGradients<double>& analytic, std::size_t samples_per_layer, double eps,
                               std::uint64_t seed) {
  if (!(eps > 0.0)) throw ConfigError("finite_difference_check: eps must be positive");
  arch.check(analytic);
  auto probe = params.cast<double>();
  const auto inputs = batch.inputs.cast<double>();
  auto loss_at = [&]() { return cross_entropy(forward_as<double>(arch, probe, inputs).logits, batch.labels); };

  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.units.size(); ++i) {
    const std::size_t n = probe.units[i].size();
    std::vector<std::size_t> picks(n);
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    std::shuffle(picks.begin(), picks.end(), rng);
    picks.resize(std::min(samples_per_layer, n));
    for (std::size_t j : picks) {
      double& p = probe.units[i].at(j);
      const double orig = p;
      const double up = orig + eps, down = orig - eps;
      p = up;
      const double loss_up = loss_at();
      p = down;
      const double loss_down = loss_at();
      p = orig;
      const double numeric = (loss_up - loss_down) / (up - down);
      const double err = std::abs(analytic.units[i].at(j) - numeric) / std::max(std::abs(numeric), 1e-8);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace flayer
