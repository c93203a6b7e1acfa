#pragma once

// Mini-batch SGD with momentum and L2 weight decay, a step learning-rate
// schedule, and early stopping on the validation loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <thread>
#include <vector>

#include "nuclearea/augment.hpp"
#include "nuclearea/error.hpp"
#include "nuclearea/kernels.hpp"
#include "nuclearea/network.hpp"
#include "nuclearea/rng.hpp"

namespace nuclearea {

struct TrainConfig {
  std::size_t batch_size = 256;
  double momentum = 0.9;
  double base_lr = 0.01;
  std::size_t lr_step = 2000;
  double lr_factor = 0.9;
  double weight_decay = 0.001;
  std::size_t max_iterations = 25000;
  std::size_t patience_evals = 10;
  std::size_t eval_interval = 500;
  std::uint64_t seed = 1;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size == 0 || lr_step == 0 || eval_interval == 0 || patience_evals == 0 || threads == 0)
      throw ConfigError("batch_size, lr_step, eval_interval, patience_evals and threads must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr_factor must lie in (0, 1)");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  }
};

inline double lr_schedule(std::size_t iteration, const TrainConfig& cfg) {
  return cfg.base_lr * std::pow(cfg.lr_factor, static_cast<double>(iteration / cfg.lr_step));
}

/// v <- momentum * v - lr * (g + decay * w); w <- w + v. Velocity buffers
/// live in params.velocity and are created on first use.
template <typename T>
void sgd_step(NetworkParams<T>& params, const NetworkParams<T>& grads, double lr, double momentum,
              double weight_decay) {
  if (grads.tensors.size() != params.tensors.size()) throw ShapeError("gradient set does not match parameters");
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    if (grads.tensors[i].shape() != params.tensors[i].shape())
      throw ShapeError("gradient for " + params.names[i] + " is " + shape_string(grads.tensors[i].shape()));
    if (!grads.tensors[i].all_finite()) throw NumericError("non-finite gradient in " + params.names[i]);
  }
  if (params.velocity.size() != params.tensors.size()) {
    params.velocity.clear();
    for (const auto& t : params.tensors) params.velocity.emplace_back(t.shape());
  }
  const T mu = static_cast<T>(momentum), eta = static_cast<T>(lr), lambda = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    T* w = params.tensors[i].data();
    T* v = params.velocity[i].data();
    const T* g = grads.tensors[i].data();
    for (std::size_t k = 0; k < params.tensors[i].size(); ++k) {
      v[k] = mu * v[k] - eta * (g[k] + lambda * w[k]);
      w[k] += v[k];
    }
  }
}

template <typename T>
void sgd_step(NetworkParams<T>& params, const NetworkParams<T>& grads, std::size_t iteration,
              const TrainConfig& cfg) {
  sgd_step(params, grads, lr_schedule(iteration, cfg), cfg.momentum, cfg.weight_decay);
}

struct HistoryRow {
  std::size_t iteration = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean minibatch loss since the previous evaluation
  double val_loss = 0.0;
};

template <typename T>
struct TrainResult {
  NetworkParams<T> params;  // best-validation snapshot
  std::vector<HistoryRow> history;
  std::size_t iterations = 0;
  std::size_t best_iteration = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
};

/// Mean cross-entropy over `samples` in inference mode.
template <typename T>
double validation_loss(const NetworkDescription& d, const NetworkParams<T>& params,
                       const std::vector<PatchSample>& samples) {
  if (samples.empty()) throw DataError("empty validation set");
  NetworkRunner<T> runner(d);
  std::vector<T> input;
  double sum = 0.0;
  for (const auto& s : samples) {
    input.assign(s.pixels.values().begin(), s.pixels.values().end());
    sum += kernels::softmax_cross_entropy(runner.forward(params, input, Mode::inference, nullptr), s.label).loss;
  }
  return sum / static_cast<double>(samples.size());
}

namespace detail {

/// Walks a source in a fresh seeded permutation per epoch.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : order_(n), seed_(seed) { reshuffle(); }

  std::size_t next() {
    if (pos_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, {0x5E, epoch_}));
    rng.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Trains `params` from `train`, evaluating on `validation` every
/// eval_interval iterations and after the last one. Workers take contiguous
/// slices of each batch; their gradient sums are added in worker order, so a
/// run is reproducible for a fixed thread count. Each sample's dropout stream
/// is keyed by (seed, iteration, batch slot).
template <typename T>
TrainResult<T> train_loop(const NetworkDescription& d, NetworkParams<T> params, const SampleSource& train,
                          const std::vector<PatchSample>& validation, const TrainConfig& cfg,
                          const std::function<void(const HistoryRow&)>& on_eval = {}) {
  cfg.validate();
  check_params(d, params);
  if (train.size() == 0) throw DataError("empty training set");
  if (validation.empty()) throw DataError("empty validation set");

  TrainResult<T> result;
  result.params = params;
  if (cfg.max_iterations == 0) return result;

  const std::size_t workers = std::min(cfg.threads, cfg.batch_size);
  std::vector<NetworkRunner<T>> runners;
  std::vector<NetworkParams<T>> partial;
  std::vector<double> partial_loss(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    runners.emplace_back(d);
    partial.push_back(params.zeros_like());
  }
  NetworkParams<T> grads = params.zeros_like();
  detail::EpochSampler sampler(train.size(), cfg.seed);
  std::vector<std::size_t> batch(cfg.batch_size);

  auto work = [&](std::size_t w, std::size_t iteration) {
    const std::size_t lo = cfg.batch_size * w / workers, hi = cfg.batch_size * (w + 1) / workers;
    for (auto& t : partial[w].tensors) t.fill(T(0));
    std::vector<T> input;
    double loss = 0.0;
    for (std::size_t k = lo; k < hi; ++k) {
      const PatchSample s = train.sample(batch[k]);
      input.assign(s.pixels.values().begin(), s.pixels.values().end());
      Rng rng(derive_seed(cfg.seed, {0xD0, iteration, k}));
      loss += runners[w].train_step(params, input, s.label, rng, partial[w]);
    }
    partial_loss[w] = loss;
  };

  double loss_since_eval = 0.0;
  std::size_t iters_since_eval = 0, evals_without_improvement = 0;
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    for (auto& b : batch) b = sampler.next();
    if (workers == 1) {
      work(0, it);
    } else {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, it);
    }
    double batch_loss = 0.0;
    for (auto& t : grads.tensors) t.fill(T(0));
    for (std::size_t w = 0; w < workers; ++w) {
      batch_loss += partial_loss[w];
      for (std::size_t i = 0; i < grads.tensors.size(); ++i) {
        T* g = grads.tensors[i].data();
        const T* p = partial[w].tensors[i].data();
        for (std::size_t k = 0; k < grads.tensors[i].size(); ++k) g[k] += p[k];
      }
    }
    batch_loss /= static_cast<double>(cfg.batch_size);
    if (!std::isfinite(batch_loss)) throw NumericError("non-finite training loss at iteration " + std::to_string(it));
    const T scale = T(1) / static_cast<T>(cfg.batch_size);
    for (auto& t : grads.tensors)
      for (auto& v : t.values()) v *= scale;
    sgd_step(params, grads, it, cfg);
    loss_since_eval += batch_loss;
    ++iters_since_eval;
    result.iterations = it + 1;

    const bool last = it + 1 == cfg.max_iterations;
    if ((it + 1) % cfg.eval_interval == 0 || last) {
      HistoryRow row{it + 1, lr_schedule(it, cfg), loss_since_eval / static_cast<double>(iters_since_eval),
                     validation_loss(d, params, validation)};
      result.history.push_back(row);
      if (on_eval) on_eval(row);
      loss_since_eval = 0.0;
      iters_since_eval = 0;
      if (row.val_loss < result.best_val_loss) {
        result.best_val_loss = row.val_loss;
        result.best_iteration = it + 1;
        result.params = params;
        evals_without_improvement = 0;
      } else if (++evals_without_improvement >= cfg.patience_evals) {
        result.stopped_early = !last;
        break;
      }
    }
  }
  return result;
}

}  // namespace nuclearea
