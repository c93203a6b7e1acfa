#pragma once

// The area classifier: eight size-preserving convolutions and two fully
// connected layers over a square RGB patch.
//
//   conv5x5(w1) pool  conv3x3(w1) pool  conv3x3(w2) x3 pool drop
//   conv3x3(w2) x3 pool drop  flatten  fc(f) drop  fc(classes)  softmax
//
// with ReLU after every convolution and after the first fully connected
// layer. w1=32, w2=64, f=128 for the full-size model; narrower widths exist
// only so gradient checks stay cheap.
//
// Flatten order is channel-major, row-major within a channel, so the first
// fully connected weight matrix [f, w2*s*s] is bit-identical to a convolution
// kernel [f, w2, s, s] with s = patch/16. convert_to_fully_convolutional
// relies on this.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nuclearea/error.hpp"
#include "nuclearea/kernels.hpp"
#include "nuclearea/rng.hpp"
#include "nuclearea/tensor.hpp"

namespace nuclearea {

using kernels::Mode;

struct ArchitectureConfig {
  std::size_t num_classes = 20;
  std::size_t patch_px = 96;
  std::size_t channels = 3;
  std::size_t narrow_width = 32;  // conv1, conv2
  std::size_t wide_width = 64;    // conv3..conv8
  std::size_t fc_width = 128;
  double pool_dropout = 0.25;
  double fc_dropout = 0.5;

  static constexpr std::size_t pooling_stages = 4;
  static constexpr std::size_t downsampling = 16;

  std::size_t feature_side() const { return patch_px / downsampling; }
  std::size_t fc_input() const { return feature_side() * feature_side() * wide_width; }

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (patch_px == 0 || patch_px % downsampling != 0)
      throw ConfigError("patch_px must be a positive multiple of 16, got " + std::to_string(patch_px));
    if (channels == 0 || narrow_width == 0 || wide_width == 0 || fc_width == 0)
      throw ConfigError("layer widths must be positive");
    kernels::check_dropout_rate(pool_dropout);
    kernels::check_dropout_rate(fc_dropout);
  }

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

enum class LayerKind { conv, relu, maxpool, dropout, fully_connected, softmax };

struct LayerSpec {
  LayerKind kind;
  std::string name;
  // Input geometry [channels, height, width]; fully connected layers see a
  // flat vector of `channels` elements with height = width = 1.
  std::size_t in_channels = 0, in_height = 0, in_width = 0;
  std::size_t out_channels = 0, out_height = 0, out_width = 0;
  std::size_t kernel = 0;
  std::size_t pad = 0;
  double rate = 0.0;
  int param_slot = -1;  // index of the weight tensor; the bias follows it

  std::size_t in_size() const { return in_channels * in_height * in_width; }
  std::size_t out_size() const { return out_channels * out_height * out_width; }
};

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;
  bool is_bias = false;
};

struct NetworkDescription {
  ArchitectureConfig config;
  std::vector<LayerSpec> layers;
  std::vector<ParamSpec> params;

  std::size_t num_classes() const { return config.num_classes; }
};

/// Lays out the layer sequence for `config`.
inline NetworkDescription build_paper_architecture(const ArchitectureConfig& config) {
  config.validate();
  NetworkDescription d{config, {}, {}};
  std::size_t c = config.channels, h = config.patch_px, w = config.patch_px;

  auto add_params = [&](const std::string& name, Shape wshape, std::size_t fan_in, std::size_t out) {
    d.params.push_back({name + ".weight", std::move(wshape), fan_in, false});
    d.params.push_back({name + ".bias", Shape{out}, fan_in, true});
    return static_cast<int>(d.params.size() - 2);
  };
  auto push = [&](LayerSpec s) {
    s.in_channels = s.in_channels ? s.in_channels : c;
    s.in_height = s.in_height ? s.in_height : h;
    s.in_width = s.in_width ? s.in_width : w;
    c = s.out_channels;
    h = s.out_height;
    w = s.out_width;
    d.layers.push_back(std::move(s));
  };
  auto conv = [&](std::size_t index, std::size_t k, std::size_t out) {
    const std::string name = "conv" + std::to_string(index);
    LayerSpec s{LayerKind::conv, name};
    s.kernel = k;
    s.pad = (k - 1) / 2;
    s.out_channels = out;
    s.out_height = h;
    s.out_width = w;
    s.param_slot = add_params(name, Shape{out, c, k, k}, c * k * k, out);
    push(s);
    LayerSpec r{LayerKind::relu, name + ".relu"};
    r.out_channels = c;
    r.out_height = h;
    r.out_width = w;
    push(r);
  };
  auto pool = [&](std::size_t index) {
    LayerSpec s{LayerKind::maxpool, "pool" + std::to_string(index)};
    s.out_channels = c;
    s.out_height = h / 2;
    s.out_width = w / 2;
    push(s);
  };
  auto dropout = [&](const std::string& name, double rate) {
    LayerSpec s{LayerKind::dropout, name};
    s.rate = rate;
    s.out_channels = c;
    s.out_height = h;
    s.out_width = w;
    push(s);
  };
  auto fc = [&](const std::string& name, std::size_t out, bool relu) {
    const std::size_t in = c * h * w;
    LayerSpec s{LayerKind::fully_connected, name};
    s.in_channels = in;
    s.in_height = s.in_width = 1;
    s.out_channels = out;
    s.out_height = s.out_width = 1;
    s.param_slot = add_params(name, Shape{out, in}, in, out);
    push(s);
    if (relu) {
      LayerSpec r{LayerKind::relu, name + ".relu"};
      r.out_channels = out;
      r.out_height = r.out_width = 1;
      push(r);
    }
  };

  conv(1, 5, config.narrow_width);
  pool(1);
  conv(2, 3, config.narrow_width);
  pool(2);
  conv(3, 3, config.wide_width);
  conv(4, 3, config.wide_width);
  conv(5, 3, config.wide_width);
  pool(3);
  dropout("drop3", config.pool_dropout);
  conv(6, 3, config.wide_width);
  conv(7, 3, config.wide_width);
  conv(8, 3, config.wide_width);
  pool(4);
  dropout("drop4", config.pool_dropout);
  fc("fc1", config.fc_width, true);
  dropout("drop_fc", config.fc_dropout);
  fc("fc2", config.num_classes, false);
  LayerSpec sm{LayerKind::softmax, "softmax"};
  sm.out_channels = c;
  sm.out_height = sm.out_width = 1;
  push(sm);
  return d;
}

/// Named parameter tensors in architecture order, with SGD momentum buffers.
template <typename T>
struct NetworkParams {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;
  std::vector<Tensor<T>> velocity;

  std::size_t count() const { return tensors.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  const Tensor<T>& get(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return tensors[i];
    throw DataError("no parameter named " + name);
  }

  /// Same names and shapes, all zero (used for gradient accumulators).
  NetworkParams zeros_like() const {
    NetworkParams z;
    z.names = names;
    for (const auto& t : tensors) z.tensors.emplace_back(t.shape());
    return z;
  }

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    for (const auto& t : velocity) out.velocity.push_back(t.template cast<U>());
    return out;
  }
};

/// Throws ShapeError if `params` does not match the architecture.
template <typename T>
void check_params(const NetworkDescription& d, const NetworkParams<T>& params) {
  if (params.tensors.size() != d.params.size())
    throw ShapeError("architecture has " + std::to_string(d.params.size()) + " parameter tensors, got " +
                     std::to_string(params.tensors.size()));
  for (std::size_t i = 0; i < d.params.size(); ++i) {
    if (params.names[i] != d.params[i].name)
      throw ShapeError("parameter " + std::to_string(i) + " is named " + params.names[i] + ", expected " +
                       d.params[i].name);
    if (params.tensors[i].shape() != d.params[i].shape)
      throw ShapeError(d.params[i].name + " has shape " + shape_string(params.tensors[i].shape()) +
                       ", architecture expects " + shape_string(d.params[i].shape));
  }
}

/// Biases are 0.1; weights are uniform on (-a, a) with a = sqrt(3 / fan_in).
/// Each tensor draws from its own stream so the result does not depend on
/// initialization order.
template <typename T>
NetworkParams<T> init_params(const NetworkDescription& d, std::uint64_t seed) {
  NetworkParams<T> p;
  for (std::size_t i = 0; i < d.params.size(); ++i) {
    const auto& spec = d.params[i];
    p.names.push_back(spec.name);
    Tensor<T> t(spec.shape);
    if (spec.is_bias) {
      t.fill(static_cast<T>(0.1));
    } else {
      Rng rng(derive_seed(seed, {0x1417, i}));
      const double a = std::sqrt(3.0 / static_cast<double>(spec.fan_in));
      for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-a, a));
    }
    p.tensors.push_back(std::move(t));
    p.velocity.emplace_back(spec.shape);
  }
  return p;
}

using ClassProbabilities = std::vector<double>;

/// Executes the layer sequence for one sample at a time, keeping every
/// intermediate activation for backward. Not thread-safe; use one runner per
/// thread.
template <typename T>
class NetworkRunner {
 public:
  explicit NetworkRunner(const NetworkDescription& d) : desc_(&d) {
    const auto& layers = d.layers;
    acts_.resize(layers.size());
    cols_.resize(layers.size());
    argmax_.resize(layers.size());
    masks_.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      acts_[i].resize(layers[i].out_size());
      if (layers[i].kind == LayerKind::maxpool) argmax_[i].resize(layers[i].out_size());
      if (layers[i].kind == LayerKind::dropout) masks_[i].resize(layers[i].out_size());
    }
  }

  const NetworkDescription& description() const { return *desc_; }

  /// Runs the network on `input` [C*H*W] and returns the logits. In train
  /// mode `rng` drives dropout and must be non-null.
  std::span<const T> forward(const NetworkParams<T>& params, std::span<const T> input, Mode mode, Rng* rng) {
    const auto& layers = desc_->layers;
    if (input.size() != layers.front().in_size())
      throw ShapeError("network input has " + std::to_string(input.size()) + " elements, expected " +
                       std::to_string(layers.front().in_size()) + " (3 x patch_px x patch_px)");
    input_ = input;
    mode_ = mode;
    const T* x = input.data();
    std::size_t logits_layer = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      T* y = acts_[i].data();
      switch (l.kind) {
        case LayerKind::conv: {
          const auto g = geometry(l);
          kernels::conv2d_forward_raw(g, x, params.tensors[l.param_slot].data(),
                                      params.tensors[l.param_slot + 1].data(), y, cols_[i]);
          break;
        }
        case LayerKind::relu:
          std::copy(x, x + l.out_size(), y);
          kernels::relu_forward_raw(y, l.out_size());
          break;
        case LayerKind::maxpool:
          kernels::maxpool2_forward_raw(x, l.in_channels, l.in_height, l.in_width, y, argmax_[i].data());
          break;
        case LayerKind::dropout:
          std::copy(x, x + l.out_size(), y);
          if (mode == Mode::train && l.rate > 0.0) {
            if (rng == nullptr) throw ConfigError("train-mode forward requires a dropout RNG");
            kernels::dropout_forward_raw(y, l.out_size(), l.rate, *rng, masks_[i].data());
          }
          break;
        case LayerKind::fully_connected:
          kernels::fully_connected_forward_raw(x, params.tensors[l.param_slot].data(),
                                               params.tensors[l.param_slot + 1].data(), l.out_channels,
                                               l.in_channels, y);
          logits_layer = i;
          break;
        case LayerKind::softmax:
          // The softmax is folded into the loss; its buffer mirrors the logits.
          std::copy(x, x + l.out_size(), y);
          break;
      }
      x = y;
    }
    return std::span<const T>(acts_[logits_layer].data(), acts_[logits_layer].size());
  }

  /// Back-propagates `logit_grad` through the last forward pass, adding
  /// parameter gradients into `grads`. Writes d loss / d input when
  /// `input_grad` is non-empty.
  void backward(const NetworkParams<T>& params, std::span<const T> logit_grad, NetworkParams<T>& grads,
                std::span<T> input_grad = {}) {
    const auto& layers = desc_->layers;
    std::size_t i = layers.size() - 1;
    if (layers[i].kind == LayerKind::softmax) --i;
    grad_.assign(logit_grad.begin(), logit_grad.end());
    for (std::size_t step = i + 1; step-- > 0;) {
      const auto& l = layers[step];
      const T* x = step == 0 ? input_.data() : acts_[step - 1].data();
      const bool need_input = step > 0 || !input_grad.empty();
      T* dx = nullptr;
      if (need_input) {
        if (step == 0) {
          dx = input_grad.data();
        } else {
          grad_next_.resize(l.in_size());
          dx = grad_next_.data();
        }
      }
      switch (l.kind) {
        case LayerKind::conv:
          kernels::conv2d_backward_raw(geometry(l), cols_[step].data(), params.tensors[l.param_slot].data(),
                                       grad_.data(), grads.tensors[l.param_slot].data(),
                                       grads.tensors[l.param_slot + 1].data(), dx, dcols_);
          break;
        case LayerKind::relu:
          if (dx) {
            std::copy(grad_.begin(), grad_.end(), dx);
            kernels::relu_backward_raw(acts_[step].data(), dx, l.out_size());
          }
          break;
        case LayerKind::maxpool:
          if (dx) kernels::maxpool2_backward_raw(grad_.data(), argmax_[step].data(), l.out_size(), dx, l.in_size());
          break;
        case LayerKind::dropout:
          if (dx) {
            if (mode_ == Mode::train && l.rate > 0.0)
              for (std::size_t k = 0; k < l.out_size(); ++k) dx[k] = grad_[k] * masks_[step][k];
            else
              std::copy(grad_.begin(), grad_.end(), dx);
          }
          break;
        case LayerKind::fully_connected:
          kernels::fully_connected_backward_raw(x, params.tensors[l.param_slot].data(), grad_.data(),
                                                l.out_channels, l.in_channels,
                                                grads.tensors[l.param_slot].data(),
                                                grads.tensors[l.param_slot + 1].data(), dx);
          break;
        case LayerKind::softmax:
          break;
      }
      if (step > 0) grad_.swap(grad_next_);
    }
  }

  /// Forward in train mode plus cross-entropy backward. Returns the loss.
  double train_step(const NetworkParams<T>& params, std::span<const T> input, std::size_t label, Rng& rng,
                    NetworkParams<T>& grads) {
    const auto logits = forward(params, input, Mode::train, &rng);
    const auto sce = kernels::softmax_cross_entropy(logits, label);
    logit_grad_.assign(sce.gradient.begin(), sce.gradient.end());
    backward(params, logit_grad_, grads);
    return sce.loss;
  }

  ClassProbabilities predict(const NetworkParams<T>& params, std::span<const T> input) {
    return kernels::softmax(forward(params, input, Mode::inference, nullptr));
  }

 private:
  static kernels::ConvGeometry geometry(const LayerSpec& l) {
    return {l.in_channels, l.in_height, l.in_width, l.out_channels, l.kernel, l.kernel, l.pad};
  }

  const NetworkDescription* desc_;
  std::span<const T> input_;
  Mode mode_ = Mode::inference;
  std::vector<AlignedVector<T>> acts_;
  std::vector<AlignedVector<T>> cols_;
  std::vector<std::vector<std::uint32_t>> argmax_;
  std::vector<AlignedVector<T>> masks_;
  AlignedVector<T> grad_, grad_next_, dcols_, logit_grad_;
};

/// Convenience single-patch forward. `patch` must be [3, patch_px, patch_px].
template <typename T>
ClassProbabilities forward(const NetworkDescription& d, const NetworkParams<T>& params, const Tensor<T>& patch,
                           Mode mode = Mode::inference, Rng* rng = nullptr) {
  const Shape expected{d.config.channels, d.config.patch_px, d.config.patch_px};
  if (patch.shape() != expected)
    throw ShapeError("patch is " + shape_string(patch.shape()) + ", network expects " + shape_string(expected));
  NetworkRunner<T> runner(d);
  return kernels::softmax(runner.forward(params, patch.values(), mode, rng));
}

// ---------------------------------------------------------------------------
// Fully convolutional form

/// The patch classifier with both fully connected layers recast as
/// convolutions: fc1 as a (patch/16)x(patch/16) valid convolution, fc2 as 1x1.
template <typename T>
struct DenseNetwork {
  NetworkDescription patch_model;
  NetworkParams<T> params;  // conv1..conv8 as-is, fc1/fc2 reshaped to 4-D
};

template <typename T>
DenseNetwork<T> convert_to_fully_convolutional(const NetworkDescription& d, const NetworkParams<T>& params) {
  check_params(d, params);
  DenseNetwork<T> dense{d, {}};
  dense.params.names = params.names;
  dense.params.tensors = params.tensors;
  const std::size_t s = d.config.feature_side();
  for (std::size_t i = 0; i < dense.params.names.size(); ++i) {
    auto& t = dense.params.tensors[i];
    if (dense.params.names[i] == "fc1.weight") t.reshape({d.config.fc_width, d.config.wide_width, s, s});
    if (dense.params.names[i] == "fc2.weight") t.reshape({d.config.num_classes, d.config.fc_width, 1, 1});
  }
  return dense;
}

/// Fully convolutional evaluation over a whole image [3,H,W] with H and W
/// multiples of 16 and at least patch-sized. Returns class probabilities
/// [gh, gw, K] on a stride-16 grid whose cell (i, j) covers the window with
/// top-left corner (16 j, 16 i).
///
/// Convolution padding applies at the image border only, so away from a
/// patch-sized input the values differ from running the patch model on the
/// cropped windows; dense_inference in detection.hpp gives the exact map.
template <typename T>
Tensor<T> dense_forward_shared(const DenseNetwork<T>& net, const Tensor<T>& image) {
  using namespace kernels;
  const auto& cfg = net.patch_model.config;
  if (image.ndim() != 3 || image.dim(0) != cfg.channels)
    throw ShapeError("dense input must be [3,H,W], got " + shape_string(image.shape()));
  if (image.dim(1) < cfg.patch_px || image.dim(2) < cfg.patch_px)
    throw ShapeError("dense input " + shape_string(image.shape()) + " smaller than the patch");
  if (image.dim(1) % ArchitectureConfig::downsampling || image.dim(2) % ArchitectureConfig::downsampling)
    throw ShapeError("dense input height and width must be multiples of 16, got " + shape_string(image.shape()));

  Tensor<T> x = image;
  for (const auto& l : net.patch_model.layers) {
    if (l.kind == LayerKind::conv) {
      const auto& w = net.params.tensors[l.param_slot];
      const auto& b = net.params.tensors[l.param_slot + 1];
      x = relu(conv2d(x, w, b.values(), l.pad));
    } else if (l.kind == LayerKind::maxpool) {
      x = maxpool2(x);
    }
  }
  const auto& w1 = net.params.get("fc1.weight");
  const auto& b1 = net.params.get("fc1.bias");
  const auto& w2 = net.params.get("fc2.weight");
  const auto& b2 = net.params.get("fc2.bias");
  x = relu(conv2d(x, w1, b1.values(), 0));
  x = conv2d(x, w2, b2.values(), 0);

  const std::size_t k = x.dim(0), gh = x.dim(1), gw = x.dim(2);
  Tensor<T> out({gh, gw, k});
  std::vector<T> logits(k);
  for (std::size_t i = 0; i < gh; ++i) {
    for (std::size_t j = 0; j < gw; ++j) {
      for (std::size_t c = 0; c < k; ++c) logits[c] = x.at(c, i, j);
      const auto p = softmax<T>(logits);
      for (std::size_t c = 0; c < k; ++c) out[(i * gw + j) * k + c] = static_cast<T>(p[c]);
    }
  }
  return out;
}

}  // namespace nuclearea
