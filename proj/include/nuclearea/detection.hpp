#pragma once

// Dense application of the patch classifier and nucleus detection on the
// resulting background-probability map.
//
// The map is exact: every grid vector is the patch model evaluated on the
// window centered at that grid point. Stride 16 is the network's native
// output stride; finer strides are assembled by shift-and-stitch, i.e. the
// stride-16 map is evaluated on inputs shifted by every multiple of the
// requested stride below 16 and the results are interleaved.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "nuclearea/binning.hpp"
#include "nuclearea/error.hpp"
#include "nuclearea/image.hpp"
#include "nuclearea/network.hpp"
#include "nuclearea/weights_io.hpp"

namespace nuclearea {

struct ProbabilityMap {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t classes = 0;
  std::size_t stride = 16;
  double origin_x = 0.0;  // image coordinates of grid point (0, 0)
  double origin_y = 0.0;
  std::vector<double> probs;  // [grid_h, grid_w, classes]

  const double* at(std::size_t i, std::size_t j) const { return probs.data() + (i * grid_w + j) * classes; }
  double* at(std::size_t i, std::size_t j) { return probs.data() + (i * grid_w + j) * classes; }
  double background(std::size_t i, std::size_t j) const { return at(i, j)[classes - 1]; }
  double x(std::size_t j) const { return origin_x + static_cast<double>(j * stride); }
  double y(std::size_t i) const { return origin_y + static_cast<double>(i * stride); }
};

inline void check_stride(std::size_t stride) {
  if (stride == 0 || ArchitectureConfig::downsampling % stride != 0)
    throw ConfigError("stride must divide 16, got " + std::to_string(stride));
}

namespace detail {

/// Evaluates windows centered at (cx0 + j*step, cy0 + i*step) of `image`
/// (image coordinates, all windows inside the image) and writes them to
/// map rows/cols (row0 + i*every, col0 + j*every).
template <typename T>
void evaluate_windows(const NetworkDescription& d, const NetworkParams<T>& params, const Image& image,
                      std::size_t cx0, std::size_t cy0, std::size_t nx, std::size_t ny, std::size_t step,
                      ProbabilityMap& map, std::size_t row0, std::size_t col0, std::size_t every,
                      std::size_t threads) {
  const std::size_t p = d.config.patch_px, half = p / 2, total = nx * ny;
  auto work = [&](std::size_t lo, std::size_t hi) {
    NetworkRunner<T> runner(d);
    std::vector<T> window(3 * p * p);
    for (std::size_t w = lo; w < hi; ++w) {
      const std::size_t i = w / nx, j = w % nx;
      const std::size_t x0 = cx0 + j * step - half, y0 = cy0 + i * step - half;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t r = 0; r < p; ++r) {
          const float* src = image.data() + (c * image.dim(1) + y0 + r) * image.dim(2) + x0;
          std::copy(src, src + p, window.data() + (c * p + r) * p);
        }
      const auto probs = runner.predict(params, window);
      std::copy(probs.begin(), probs.end(), map.at(row0 + i * every, col0 + j * every));
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, total));
  if (n == 1) {
    work(0, total);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work, total * t / n, total * (t + 1) / n);
}

}  // namespace detail

/// Dense map over every window that fits inside `image`. Grid point (i, j)
/// is centered at (patch/2 + j*stride, patch/2 + i*stride), so a
/// W-wide image yields floor((W - patch) / stride) + 1 columns.
template <typename T>
ProbabilityMap dense_inference(const NetworkDescription& d, const NetworkParams<T>& params, const Image& image,
                               std::size_t stride, std::size_t threads = 1) {
  check_stride(stride);
  check_params(d, params);
  const std::size_t p = d.config.patch_px;
  if (image.ndim() != 3 || image.dim(0) != 3) throw ShapeError("dense input must be [3,H,W]");
  if (image.dim(1) < p || image.dim(2) < p)
    throw DataError("image " + shape_string(image.shape()) + " is smaller than the " + std::to_string(p) + " px patch");
  ProbabilityMap map;
  map.grid_h = (image.dim(1) - p) / stride + 1;
  map.grid_w = (image.dim(2) - p) / stride + 1;
  map.classes = d.config.num_classes;
  map.stride = stride;
  map.origin_x = map.origin_y = static_cast<double>(p / 2);
  map.probs.assign(map.grid_h * map.grid_w * map.classes, 0.0);

  // Shift-and-stitch: the offset (oy, ox) pass is a native stride-16 map of
  // the image shifted by (oy, ox); its cells land every `phases` rows/cols.
  const std::size_t native = ArchitectureConfig::downsampling;
  const std::size_t phases = native / stride;
  for (std::size_t py = 0; py < phases; ++py)
    for (std::size_t px = 0; px < phases; ++px) {
      if (py >= map.grid_h || px >= map.grid_w) continue;
      const std::size_t ny = (map.grid_h - py + phases - 1) / phases;
      const std::size_t nx = (map.grid_w - px + phases - 1) / phases;
      detail::evaluate_windows(d, params, image, p / 2 + px * stride, p / 2 + py * stride, nx, ny, native, map, py,
                               px, phases, threads);
    }
  return map;
}

/// Dense map centered on every stride-th pixel of the image itself, using
/// mirror padding by half a patch. Grid point (i, j) sits at (j*stride,
/// i*stride) for all positions inside the image.
template <typename T>
ProbabilityMap dense_inference_full(const NetworkDescription& d, const NetworkParams<T>& params, const Image& image,
                                    std::size_t stride, std::size_t threads = 1) {
  check_stride(stride);
  const std::size_t half = d.config.patch_px / 2;
  const std::size_t w = image_width(image), h = image_height(image);
  // Pad so that the last in-image center still has a full window.
  const std::size_t gw = (w - 1) / stride + 1, gh = (h - 1) / stride + 1;
  Image padded = mirror_pad(image, half);
  const std::size_t need_w = (gw - 1) * stride + d.config.patch_px, need_h = (gh - 1) * stride + d.config.patch_px;
  if (image_width(padded) > need_w || image_height(padded) > need_h) {
    Image cropped = make_image(need_w, need_h);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < need_h; ++y)
        for (std::size_t x = 0; x < need_w; ++x) cropped.at(c, y, x) = padded.at(c, y, x);
    padded = std::move(cropped);
  }
  ProbabilityMap map = dense_inference(d, params, padded, stride, threads);
  map.origin_x = map.origin_y = 0.0;
  return map;
}

// -- detection --------------------------------------------------------------------

struct OperatingPoint {
  double tau = 0.5;
  double d_min = 9.0;

  void validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("detection threshold must lie in (0, 1)");
    if (!(d_min > 0.0)) throw ConfigError("minimum detection separation must be positive");
  }
};

struct Detection {
  double x_px = 0.0;
  double y_px = 0.0;
  double p_background = 0.0;
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Grid points with background probability < tau and <= all 8 neighbours,
/// accepted in ascending probability (then row-major order) unless closer
/// than d_min to an accepted one.
inline std::vector<Detection> detect_nuclei(const ProbabilityMap& map, const OperatingPoint& op) {
  op.validate();
  std::vector<Detection> candidates;
  for (std::size_t i = 0; i < map.grid_h; ++i)
    for (std::size_t j = 0; j < map.grid_w; ++j) {
      const double p = map.background(i, j);
      if (!(p < op.tau)) continue;
      bool minimum = true;
      for (int di = -1; di <= 1 && minimum; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          if (!di && !dj) continue;
          const auto ni = static_cast<std::ptrdiff_t>(i) + di, nj = static_cast<std::ptrdiff_t>(j) + dj;
          if (ni < 0 || nj < 0 || ni >= static_cast<std::ptrdiff_t>(map.grid_h) ||
              nj >= static_cast<std::ptrdiff_t>(map.grid_w))
            continue;
          if (map.background(static_cast<std::size_t>(ni), static_cast<std::size_t>(nj)) < p) {
            minimum = false;
            break;
          }
        }
      if (minimum) candidates.push_back({map.x(j), map.y(i), p, i, j});
    }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.p_background < b.p_background; });
  std::vector<Detection> accepted;
  for (const auto& c : candidates) {
    bool clear = true;
    for (const auto& a : accepted)
      if (std::hypot(a.x_px - c.x_px, a.y_px - c.y_px) < op.d_min) {
        clear = false;
        break;
      }
    if (clear) accepted.push_back(c);
  }
  return accepted;
}

struct DetectedNucleus {
  double x_px = 0.0;
  double y_px = 0.0;
  double area_um2 = 0.0;
  double p_background = 0.0;
};

struct DetectionResult {
  std::vector<DetectedNucleus> nuclei;
  std::size_t dropped = 0;  // detections with foreground mass below 1e-6
};

inline DetectionResult measure_at_detections(const ProbabilityMap& map, const std::vector<Detection>& detections,
                                             const AreaBinning& b) {
  if (map.classes != b.n_bins + 1)
    throw ShapeError("map has " + std::to_string(map.classes) + " classes, detection needs " +
                     std::to_string(b.n_bins + 1));
  DetectionResult out;
  for (const auto& det : detections) {
    if (det.row >= map.grid_h || det.col >= map.grid_w) throw DataError("detection outside the map grid");
    const std::span<const double> v(map.at(det.row, det.col), map.classes);
    try {
      out.nuclei.push_back({det.x_px, det.y_px, reconstruct_area(foreground_probabilities(v, b), b), det.p_background});
    } catch (const NumericError&) {
      ++out.dropped;
    }
  }
  return out;
}

inline DetectionResult detect_and_measure(const ProbabilityMap& map, const OperatingPoint& op, const AreaBinning& b) {
  return measure_at_detections(map, detect_nuclei(map, op), b);
}

/// 0.05, 0.10, ..., 0.95.
inline std::vector<double> default_tau_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 19; ++k) g.push_back(0.05 * k);
  return g;
}

struct ValidationRegion {
  const ProbabilityMap* map = nullptr;
  double reference_mna = 0.0;
};

struct SweepPoint {
  double tau = 0.0;
  double error = 0.0;  // mean |MNA_detected - MNA_reference| over regions
  std::size_t detections = 0;
};

struct OperatingPointSearch {
  OperatingPoint best;
  std::vector<SweepPoint> sweep;
};

/// Mean absolute MNA error at one threshold. A region without detections
/// contributes its reference MNA.
inline SweepPoint evaluate_threshold(const std::vector<ValidationRegion>& regions, double tau, double d_min,
                                     const AreaBinning& b) {
  SweepPoint s{tau, 0.0, 0};
  for (const auto& r : regions) {
    const auto res = detect_and_measure(*r.map, {tau, d_min}, b);
    s.detections += res.nuclei.size();
    if (res.nuclei.empty()) {
      s.error += r.reference_mna;
      continue;
    }
    double sum = 0.0;
    for (const auto& n : res.nuclei) sum += n.area_um2;
    s.error += std::abs(sum / static_cast<double>(res.nuclei.size()) - r.reference_mna);
  }
  s.error /= static_cast<double>(regions.size());
  return s;
}

/// Threshold minimizing the mean MNA error; ties go to the smaller tau.
inline OperatingPointSearch optimize_operating_point(const std::vector<ValidationRegion>& regions,
                                                     const std::vector<double>& tau_grid, double d_min,
                                                     const AreaBinning& b) {
  if (regions.empty()) throw DataError("operating point search needs at least one validation region");
  if (tau_grid.empty()) throw ConfigError("empty threshold grid");
  OperatingPointSearch out;
  std::vector<double> grid = tau_grid;
  std::sort(grid.begin(), grid.end());
  std::size_t best = grid.size(), total = 0;
  for (double tau : grid) {
    out.sweep.push_back(evaluate_threshold(regions, tau, d_min, b));
    total += out.sweep.back().detections;
    if (best == grid.size() || out.sweep.back().error < out.sweep[best].error) best = out.sweep.size() - 1;
  }
  if (total == 0)
    throw DataError("no threshold in [" + std::to_string(grid.front()) + ", " + std::to_string(grid.back()) +
                    "] yields any detection on the validation regions");
  out.best = {grid[best], d_min};
  return out;
}

// -- matching ------------------------------------------------------------------------

struct MatchStats {
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;

  double precision() const {
    const auto d = true_positives + false_positives;
    return d ? static_cast<double>(true_positives) / static_cast<double>(d) : 0.0;
  }
  double recall() const {
    const auto d = true_positives + false_negatives;
    return d ? static_cast<double>(true_positives) / static_cast<double>(d) : 0.0;
  }
  double f1() const {
    const auto d = 2 * true_positives + false_positives + false_negatives;
    return d ? 2.0 * static_cast<double>(true_positives) / static_cast<double>(d) : 0.0;
  }

  MatchStats& operator+=(const MatchStats& o) {
    true_positives += o.true_positives;
    false_positives += o.false_positives;
    false_negatives += o.false_negatives;
    return *this;
  }
};

/// One-to-one matching of detections to reference centers within
/// `tolerance` px, greedily by increasing distance.
inline MatchStats match_detections(const std::vector<std::pair<double, double>>& detected,
                                   const std::vector<std::pair<double, double>>& reference, double tolerance) {
  struct Pair {
    double dist;
    std::size_t d, r;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < detected.size(); ++i)
    for (std::size_t k = 0; k < reference.size(); ++k) {
      const double dist =
          std::hypot(detected[i].first - reference[k].first, detected[i].second - reference[k].second);
      if (dist <= tolerance) pairs.push_back({dist, i, k});
    }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.dist < b.dist; });
  std::vector<bool> used_d(detected.size()), used_r(reference.size());
  MatchStats s;
  for (const auto& p : pairs)
    if (!used_d[p.d] && !used_r[p.r]) {
      used_d[p.d] = used_r[p.r] = true;
      ++s.true_positives;
    }
  s.false_positives = detected.size() - s.true_positives;
  s.false_negatives = reference.size() - s.true_positives;
  return s;
}

// -- persistence ---------------------------------------------------------------------

/// Stores the map as "probabilities" [grid_h, grid_w, classes] plus a
/// "geometry" record (stride, origin_x, origin_y).
inline void save_probability_map(const ProbabilityMap& map, const std::string& path) {
  Tensor<float> probs({map.grid_h, map.grid_w, map.classes});
  for (std::size_t i = 0; i < map.probs.size(); ++i) probs[i] = static_cast<float>(map.probs[i]);
  Tensor<float> geometry({3});
  geometry[0] = static_cast<float>(map.stride);
  geometry[1] = static_cast<float>(map.origin_x);
  geometry[2] = static_cast<float>(map.origin_y);
  write_tensor_container(path, {{"geometry", geometry}, {"probabilities", probs}});
}

inline ProbabilityMap load_probability_map(const std::string& path) {
  const auto tensors = read_tensor_container(path);
  const Tensor<float>* geometry = nullptr;
  const Tensor<float>* probs = nullptr;
  for (const auto& t : tensors) {
    if (t.name == "geometry") geometry = &t.tensor;
    if (t.name == "probabilities") probs = &t.tensor;
  }
  if (!geometry || !probs || geometry->size() != 3 || probs->ndim() != 3)
    throw DataError(path + " is not a probability map container");
  ProbabilityMap map;
  map.grid_h = probs->dim(0);
  map.grid_w = probs->dim(1);
  map.classes = probs->dim(2);
  map.stride = static_cast<std::size_t>((*geometry)[0]);
  map.origin_x = (*geometry)[1];
  map.origin_y = (*geometry)[2];
  map.probs.assign(probs->values().begin(), probs->values().end());
  return map;
}

}  // namespace nuclearea
