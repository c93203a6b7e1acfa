#pragma once

// Nuclear area as an ordinal class: the area range is cut into equal-width
// histogram bins, each bin is one class, and a continuous area is recovered
// as the probability-weighted mean of the bin centroids.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nuclearea/error.hpp"

namespace nuclearea {

/// Pixel pitch of the source images (0.25 um per pixel).
inline constexpr double kMicronsPerPixel = 0.25;
inline constexpr double kSquareMicronsPerPixel = kMicronsPerPixel * kMicronsPerPixel;

inline double px_to_um2(double area_px) { return area_px * kSquareMicronsPerPixel; }
inline double um2_to_px(double area_um2) { return area_um2 / kSquareMicronsPerPixel; }

struct AreaBinning {
  double a_min = 16.6;   // um^2, 0.5th percentile of the training areas
  double a_max = 151.8;  // um^2, 99.5th percentile
  std::size_t n_bins = 20;

  double width() const { return (a_max - a_min) / static_cast<double>(n_bins); }

  void validate() const {
    if (!(a_min < a_max)) throw ConfigError("area binning needs a_min < a_max");
    if (n_bins < 2) throw ConfigError("area binning needs at least 2 bins");
  }
};

/// Bin index of `area_um2`. Bins are half-open [lo, hi) except the last,
/// and areas outside [a_min, a_max] clamp to the edge bins.
inline std::size_t quantize(double area_um2, const AreaBinning& b) {
  if (!(area_um2 > 0.0)) throw DataError("area must be positive, got " + std::to_string(area_um2));
  const double pos = std::floor((area_um2 - b.a_min) / b.width());
  if (pos < 0.0) return 0;
  return std::min(static_cast<std::size_t>(pos), b.n_bins - 1);
}

inline double centroid(std::size_t bin, const AreaBinning& b) {
  if (bin >= b.n_bins)
    throw DataError("bin index " + std::to_string(bin) + " out of range for " + std::to_string(b.n_bins) + " bins");
  return b.a_min + b.width() * (static_cast<double>(bin) + 0.5);
}

/// Lower and upper area edge of `bin`.
inline std::pair<double, double> bin_edges(std::size_t bin, const AreaBinning& b) {
  const double lo = b.a_min + b.width() * static_cast<double>(bin);
  return {lo, lo + b.width()};
}

/// sum_i p_i c_i over the n_bins area classes. The weights are divided by
/// their sum, which is a no-op for a normalized vector.
inline double reconstruct_area(std::span<const double> probs, const AreaBinning& b) {
  if (probs.size() != b.n_bins)
    throw ShapeError("probability vector has " + std::to_string(probs.size()) + " entries for " +
                     std::to_string(b.n_bins) + " bins");
  double mass = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] < 0.0 || !std::isfinite(probs[i])) throw NumericError("invalid class probability");
    mass += probs[i];
    acc += probs[i] * centroid(i, b);
  }
  if (!(mass > 0.0)) throw NumericError("degenerate class probabilities (sum <= 0)");
  return mass == 1.0 ? acc : acc / mass;
}

/// Drops the background class (index n_bins) and renormalizes the
/// foreground. Throws NumericError when the foreground mass is below
/// `min_mass`.
inline std::vector<double> foreground_probabilities(std::span<const double> probs, const AreaBinning& b,
                                                    double min_mass = 1e-6) {
  if (probs.size() != b.n_bins + 1)
    throw ShapeError("combined-model output has " + std::to_string(probs.size()) + " classes, expected " +
                     std::to_string(b.n_bins + 1));
  double mass = 0.0;
  for (std::size_t i = 0; i < b.n_bins; ++i) mass += probs[i];
  if (!(mass >= min_mass)) throw NumericError("foreground probability mass below " + std::to_string(min_mass));
  std::vector<double> fg(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(b.n_bins));
  for (double& v : fg) v /= mass;
  return fg;
}

enum class MeasurementSource { manual, model };

struct AreaMeasurement {
  int region_id = 0;
  int nucleus_id = 0;
  double x_px = 0.0;
  double y_px = 0.0;
  double area_um2 = 0.0;
  MeasurementSource source = MeasurementSource::manual;
};

struct RegionStats {
  int region_id = 0;
  std::size_t count = 0;
  double mna_um2 = 0.0;
};

/// Mean nuclear area of one region. All measurements should share a region.
inline RegionStats mean_nuclear_area(std::span<const AreaMeasurement> measurements) {
  if (measurements.empty()) throw DataError("mean nuclear area of an empty region");
  double sum = 0.0;
  for (const auto& m : measurements) sum += m.area_um2;
  return {measurements.front().region_id, measurements.size(), sum / static_cast<double>(measurements.size())};
}

}  // namespace nuclearea
