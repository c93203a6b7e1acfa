#pragma once

// Forward and backward kernels for the layer set of the area classifier:
// stride-1 convolution with symmetric zero padding, 2x2 max pooling, ReLU,
// fully connected, softmax with cross-entropy, and inverted dropout.
//
// The *_raw functions work on caller-owned buffers so the network can reuse
// its workspaces; the Tensor overloads validate shapes and allocate.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "nuclearea/error.hpp"
#include "nuclearea/rng.hpp"
#include "nuclearea/tensor.hpp"

namespace nuclearea::kernels {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t pad = 0;

  std::size_t out_height() const { return in_height + 2 * pad - kernel_h + 1; }
  std::size_t out_width() const { return in_width + 2 * pad - kernel_w + 1; }
  std::size_t patch_size() const { return in_channels * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_height() * out_width(); }
  std::size_t weight_count() const { return out_channels * patch_size(); }
};

/// Unfolds `in` [C,H,W] into columns [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto h = static_cast<std::ptrdiff_t>(g.in_height);
  const auto w = static_cast<std::ptrdiff_t>(g.in_width);
  T* row = cols;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = in + c * g.in_height * g.in_width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx, row += ho * wo) {
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        // valid output columns: 0 <= ox + dx < w
        const std::ptrdiff_t x_lo = std::clamp<std::ptrdiff_t>(-dx, 0, static_cast<std::ptrdiff_t>(wo));
        const std::ptrdiff_t x_hi = std::clamp<std::ptrdiff_t>(w - dx, 0, static_cast<std::ptrdiff_t>(wo));
        for (std::size_t oy = 0; oy < ho; ++oy) {
          T* dst = row + oy * wo;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (iy < 0 || iy >= h || x_lo >= x_hi) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          std::fill(dst, dst + x_lo, T{0});
          std::memcpy(dst + x_lo, plane + iy * w + x_lo + dx,
                      static_cast<std::size_t>(x_hi - x_lo) * sizeof(T));
          std::fill(dst + x_hi, dst + wo, T{0});
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates columns back into `in_grad` [C,H,W].
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* in_grad) {
  const std::size_t ho = g.out_height(), wo = g.out_width();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto h = static_cast<std::ptrdiff_t>(g.in_height);
  const auto w = static_cast<std::ptrdiff_t>(g.in_width);
  const T* row = cols;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = in_grad + c * g.in_height * g.in_width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx, row += ho * wo) {
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x_lo = std::clamp<std::ptrdiff_t>(-dx, 0, static_cast<std::ptrdiff_t>(wo));
        const std::ptrdiff_t x_hi = std::clamp<std::ptrdiff_t>(w - dx, 0, static_cast<std::ptrdiff_t>(wo));
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * wo;
          T* dst = plane + iy * w + dx;
          for (std::ptrdiff_t ox = x_lo; ox < x_hi; ++ox) dst[ox] += src[ox];
        }
      }
    }
  }
}

/// out [Cout, Ho*Wo] = W [Cout, K] * cols [K, Ho*Wo] + b. `cols` is left
/// holding the unfolded input for a later backward call.
template <typename T>
void conv2d_forward_raw(const ConvGeometry& g, const T* in, const T* weights, const T* bias, T* out,
                        AlignedVector<T>& cols) {
  const auto k = static_cast<Eigen::Index>(g.patch_size());
  const auto n = static_cast<Eigen::Index>(g.out_pixels());
  const auto m = static_cast<Eigen::Index>(g.out_channels);
  cols.resize(static_cast<std::size_t>(k * n));
  if (g.kernel_h == 1 && g.kernel_w == 1 && g.pad == 0)
    std::memcpy(cols.data(), in, cols.size() * sizeof(T));
  else
    im2col(g, in, cols.data());
  MatrixMap<T> y(out, m, n);
  y.noalias() = ConstMatrixMap<T>(weights, m, k) * ConstMatrixMap<T>(cols.data(), k, n);
  for (Eigen::Index o = 0; o < m; ++o) y.row(o).array() += bias[o];
}

/// Accumulates dW and db; writes dInput when `in_grad` is non-null.
template <typename T>
void conv2d_backward_raw(const ConvGeometry& g, const T* cols, const T* weights, const T* out_grad,
                         T* weight_grad, T* bias_grad, T* in_grad, AlignedVector<T>& dcols) {
  const auto k = static_cast<Eigen::Index>(g.patch_size());
  const auto n = static_cast<Eigen::Index>(g.out_pixels());
  const auto m = static_cast<Eigen::Index>(g.out_channels);
  ConstMatrixMap<T> dy(out_grad, m, n);
  MatrixMap<T>(weight_grad, m, k).noalias() += dy * ConstMatrixMap<T>(cols, k, n).transpose();
  VectorMap<T>(bias_grad, m) += dy.rowwise().sum();
  if (in_grad == nullptr) return;
  dcols.resize(static_cast<std::size_t>(k * n));
  MatrixMap<T> dc(dcols.data(), k, n);
  dc.noalias() = ConstMatrixMap<T>(weights, m, k).transpose() * dy;
  std::fill(in_grad, in_grad + g.in_channels * g.in_height * g.in_width, T{0});
  col2im(g, dcols.data(), in_grad);
}

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weights, std::size_t bias_len,
                           std::size_t pad) {
  if (input.ndim() != 3)
    throw ShapeError("conv2d input must be [C,H,W], got " + shape_string(input.shape()));
  if (weights.ndim() != 4)
    throw ShapeError("conv2d weights must be [C_out,C_in,kH,kW], got " + shape_string(weights.shape()));
  if (weights.dim(1) != input.dim(0))
    throw ShapeError("conv2d weights dim 1 (C_in) is " + std::to_string(weights.dim(1)) +
                     " but input has " + std::to_string(input.dim(0)) + " channels");
  if (bias_len != weights.dim(0))
    throw ShapeError("conv2d bias length " + std::to_string(bias_len) + " != C_out " +
                     std::to_string(weights.dim(0)));
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), weights.dim(0), weights.dim(2), weights.dim(3),
                 pad};
  if (input.dim(1) + 2 * pad < g.kernel_h)
    throw ShapeError("conv2d input height " + std::to_string(input.dim(1)) + " smaller than kernel height");
  if (input.dim(2) + 2 * pad < g.kernel_w)
    throw ShapeError("conv2d input width " + std::to_string(input.dim(2)) + " smaller than kernel width");
  return g;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> bias, std::size_t pad) {
  const auto g = conv_geometry(input, weights, bias.size(), pad);
  Tensor<T> out({g.out_channels, g.out_height(), g.out_width()});
  AlignedVector<T> cols;
  conv2d_forward_raw(g, input.data(), weights.data(), bias.data(), out.data(), cols);
  return out;
}

template <typename T>
struct ConvGradients {
  Tensor<T> input;
  Tensor<T> weights;
  std::vector<T> bias;
};

template <typename T>
ConvGradients<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights, std::size_t pad,
                                 const Tensor<T>& out_grad) {
  const auto g = conv_geometry(input, weights, weights.dim(0), pad);
  if (out_grad.shape() != Shape{g.out_channels, g.out_height(), g.out_width()})
    throw ShapeError("conv2d upstream gradient " + shape_string(out_grad.shape()) + " does not match output");
  ConvGradients<T> grads{Tensor<T>(input.shape()), Tensor<T>(weights.shape()),
                         std::vector<T>(g.out_channels, T{0})};
  AlignedVector<T> cols, dcols;
  cols.resize(g.patch_size() * g.out_pixels());
  im2col(g, input.data(), cols.data());
  conv2d_backward_raw(g, cols.data(), weights.data(), out_grad.data(), grads.weights.data(), grads.bias.data(),
                      grads.input.data(), dcols);
  return grads;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2

/// `argmax` receives, per output element, the flat input index of the
/// winning element (first maximum in row-major window order).
template <typename T>
void maxpool2_forward_raw(const T* in, std::size_t channels, std::size_t h, std::size_t w, T* out,
                          std::uint32_t* argmax) {
  const std::size_t ho = h / 2, wo = w / 2;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = in + c * h * w;
    const std::size_t base = c * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t i0 = (2 * oy) * w + 2 * ox;
        std::size_t best = i0;
        for (std::size_t cand : {i0 + 1, i0 + w, i0 + w + 1})
          if (plane[cand] > plane[best]) best = cand;
        const std::size_t o = (c * ho + oy) * wo + ox;
        out[o] = plane[best];
        if (argmax) argmax[o] = static_cast<std::uint32_t>(base + best);
      }
    }
  }
}

template <typename T>
void maxpool2_backward_raw(const T* out_grad, const std::uint32_t* argmax, std::size_t out_count, T* in_grad,
                           std::size_t in_count) {
  std::fill(in_grad, in_grad + in_count, T{0});
  for (std::size_t o = 0; o < out_count; ++o) in_grad[argmax[o]] += out_grad[o];
}

template <typename T>
void check_poolable(const Tensor<T>& input) {
  if (input.ndim() != 3) throw ShapeError("maxpool2 input must be [C,H,W], got " + shape_string(input.shape()));
  if (input.dim(1) % 2 != 0) throw ShapeError("maxpool2 height " + std::to_string(input.dim(1)) + " is odd");
  if (input.dim(2) % 2 != 0) throw ShapeError("maxpool2 width " + std::to_string(input.dim(2)) + " is odd");
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input) {
  check_poolable(input);
  Tensor<T> out({input.dim(0), input.dim(1) / 2, input.dim(2) / 2});
  maxpool2_forward_raw(input.data(), input.dim(0), input.dim(1), input.dim(2), out.data(),
                       static_cast<std::uint32_t*>(nullptr));
  return out;
}

template <typename T>
Tensor<T> maxpool2_backward(const Tensor<T>& input, const Tensor<T>& out_grad) {
  check_poolable(input);
  Tensor<T> out({input.dim(0), input.dim(1) / 2, input.dim(2) / 2});
  if (out_grad.shape() != out.shape())
    throw ShapeError("maxpool2 upstream gradient " + shape_string(out_grad.shape()) + " does not match output");
  std::vector<std::uint32_t> argmax(out.size());
  maxpool2_forward_raw(input.data(), input.dim(0), input.dim(1), input.dim(2), out.data(), argmax.data());
  Tensor<T> grad(input.shape());
  maxpool2_backward_raw(out_grad.data(), argmax.data(), out.size(), grad.data(), grad.size());
  return grad;
}

// ---------------------------------------------------------------------------
// ReLU. The subgradient at exactly 0 is 0.

template <typename T>
void relu_forward_raw(T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > T{0} ? x[i] : T{0};
}

/// `activated` may be the pre- or post-activation values; both give the same mask.
template <typename T>
void relu_backward_raw(const T* activated, T* grad, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!(activated[i] > T{0})) grad[i] = T{0};
}

template <typename T>
Tensor<T> relu(Tensor<T> input) {
  relu_forward_raw(input.data(), input.size());
  return input;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, Tensor<T> out_grad) {
  if (input.shape() != out_grad.shape())
    throw ShapeError("relu upstream gradient " + shape_string(out_grad.shape()) + " vs input " +
                     shape_string(input.shape()));
  relu_backward_raw(input.data(), out_grad.data(), out_grad.size());
  return out_grad;
}

// ---------------------------------------------------------------------------
// Fully connected: y = W x + b, W is [m, n].

template <typename T>
void fully_connected_forward_raw(const T* x, const T* weights, const T* bias, std::size_t m, std::size_t n,
                                 T* y) {
  VectorMap<T> out(y, static_cast<Eigen::Index>(m));
  out.noalias() = ConstMatrixMap<T>(weights, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)) *
                  ConstVectorMap<T>(x, static_cast<Eigen::Index>(n));
  out += ConstVectorMap<T>(bias, static_cast<Eigen::Index>(m));
}

template <typename T>
void fully_connected_backward_raw(const T* x, const T* weights, const T* out_grad, std::size_t m, std::size_t n,
                                  T* weight_grad, T* bias_grad, T* in_grad) {
  const auto mm = static_cast<Eigen::Index>(m), nn = static_cast<Eigen::Index>(n);
  ConstVectorMap<T> dy(out_grad, mm);
  MatrixMap<T>(weight_grad, mm, nn).noalias() += dy * ConstVectorMap<T>(x, nn).transpose();
  VectorMap<T>(bias_grad, mm) += dy;
  if (in_grad)
    VectorMap<T>(in_grad, nn).noalias() = ConstMatrixMap<T>(weights, mm, nn).transpose() * dy;
}

template <typename T>
void check_fully_connected(std::size_t x_len, const Tensor<T>& weights, std::size_t bias_len) {
  if (weights.ndim() != 2) throw ShapeError("fully_connected weights must be [m,n], got " + shape_string(weights.shape()));
  if (weights.dim(1) != x_len)
    throw ShapeError("fully_connected weights dim 1 (n) is " + std::to_string(weights.dim(1)) +
                     " but input has length " + std::to_string(x_len));
  if (bias_len != weights.dim(0))
    throw ShapeError("fully_connected bias length " + std::to_string(bias_len) + " != m " +
                     std::to_string(weights.dim(0)));
}

template <typename T>
std::vector<T> fully_connected(std::span<const T> x, const Tensor<T>& weights, std::span<const T> bias) {
  check_fully_connected(x.size(), weights, bias.size());
  std::vector<T> y(weights.dim(0));
  fully_connected_forward_raw(x.data(), weights.data(), bias.data(), weights.dim(0), weights.dim(1), y.data());
  return y;
}

template <typename T>
struct FullyConnectedGradients {
  std::vector<T> input;
  Tensor<T> weights;
  std::vector<T> bias;
};

template <typename T>
FullyConnectedGradients<T> fully_connected_backward(std::span<const T> x, const Tensor<T>& weights,
                                                    std::span<const T> out_grad) {
  check_fully_connected(x.size(), weights, weights.dim(0));
  if (out_grad.size() != weights.dim(0))
    throw ShapeError("fully_connected upstream gradient length " + std::to_string(out_grad.size()) +
                     " != m " + std::to_string(weights.dim(0)));
  FullyConnectedGradients<T> g{std::vector<T>(x.size()), Tensor<T>(weights.shape()),
                               std::vector<T>(weights.dim(0), T{0})};
  fully_connected_backward_raw(x.data(), weights.data(), out_grad.data(), weights.dim(0), weights.dim(1),
                               g.weights.data(), g.bias.data(), g.input.data());
  return g;
}

// ---------------------------------------------------------------------------
// Softmax + cross-entropy, evaluated in double with max subtraction.

struct SoftmaxLoss {
  std::vector<double> probabilities;
  double loss = 0.0;
  std::vector<double> gradient;  // d loss / d logits = p - onehot(label)
};

template <typename T>
std::vector<double> softmax(std::span<const T> logits) {
  if (logits.empty()) throw ShapeError("softmax over zero classes");
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += p[i] = std::exp(static_cast<double>(logits[i]) - mx);
  for (double& v : p) v /= sum;
  return p;
}

template <typename T>
SoftmaxLoss softmax_cross_entropy(std::span<const T> logits, std::size_t label) {
  if (logits.size() < 2) throw ShapeError("softmax_cross_entropy needs at least 2 classes");
  if (label >= logits.size())
    throw DataError("label " + std::to_string(label) + " out of range for " + std::to_string(logits.size()) +
                    " classes");
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (T v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double log_sum = std::log(sum);
  SoftmaxLoss r;
  r.probabilities.resize(logits.size());
  r.gradient.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    r.probabilities[i] = std::exp(static_cast<double>(logits[i]) - mx - log_sum);
    r.gradient[i] = r.probabilities[i] - (i == label ? 1.0 : 0.0);
  }
  r.loss = -(static_cast<double>(logits[label]) - mx - log_sum);
  return r;
}

// ---------------------------------------------------------------------------
// Inverted dropout: survivors are scaled by 1/(1-rate) at train time, so
// inference is exactly the identity.

enum class Mode { train, inference };

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
}

/// Applies dropout in place and writes the per-element multiplier to `mask`.
template <typename T>
void dropout_forward_raw(T* x, std::size_t n, double rate, Rng& rng, T* mask) {
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < n; ++i) {
    const T m = rng.uniform() < rate ? T{0} : keep_scale;
    mask[i] = m;
    x[i] *= m;
  }
}

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;  // empty in inference mode
};

template <typename T>
DropoutResult<T> dropout(Tensor<T> input, double rate, Rng& rng, Mode mode) {
  check_dropout_rate(rate);
  if (mode == Mode::inference || rate == 0.0) {
    Tensor<T> mask(input.shape(), T{1});
    return {std::move(input), std::move(mask)};
  }
  Tensor<T> mask(input.shape());
  dropout_forward_raw(input.data(), input.size(), rate, rng, mask.data());
  return {std::move(input), std::move(mask)};
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& mask, Tensor<T> out_grad) {
  if (mask.shape() != out_grad.shape()) throw ShapeError("dropout mask and gradient shapes differ");
  for (std::size_t i = 0; i < out_grad.size(); ++i) out_grad[i] *= mask[i];
  return out_grad;
}

}  // namespace nuclearea::kernels
