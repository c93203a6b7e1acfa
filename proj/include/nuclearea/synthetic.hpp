#pragma once

// Synthetic H&E-like regions with exact ground truth: dark purple elliptical
// nuclei on textured pink stroma, never overlapping. Areas follow a
// log-normal law clipped (by redraw) to the binning range; rasterization is
// anti-aliased, so the per-nucleus pixel coverage converges to the analytic
// ellipse area.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "nuclearea/binning.hpp"
#include "nuclearea/error.hpp"
#include "nuclearea/image.hpp"
#include "nuclearea/rng.hpp"

namespace nuclearea {

struct SyntheticRegionSpec {
  std::size_t image_px = 1024;
  std::size_t nucleus_count = 240;
  double area_median_um2 = 55.0;
  double area_sigma_log = 0.45;
  double area_min_um2 = 16.6;
  double area_max_um2 = 151.8;
  double eccentricity_min = 1.0;  // major / minor axis ratio
  double eccentricity_max = 2.0;
  std::array<double, 3> nucleus_color{0.34, 0.20, 0.52};
  double nucleus_jitter = 0.06;
  double nucleus_texture = 0.03;
  std::array<double, 3> stroma_color{0.93, 0.71, 0.82};
  double stroma_noise = 0.05;
  double stroma_scale_px = 32.0;
  double pixel_noise = 0.015;
  double min_gap_px = 4.0;

  void validate() const {
    if (image_px < 16) throw ConfigError("synthetic image_px must be at least 16");
    if (!(area_min_um2 > 0.0 && area_min_um2 < area_max_um2)) throw ConfigError("synthetic area range invalid");
    if (!(eccentricity_min >= 1.0 && eccentricity_min <= eccentricity_max))
      throw ConfigError("synthetic eccentricity range invalid");
    if (min_gap_px < 0.0) throw ConfigError("synthetic min_gap_px must be non-negative");
  }
};

struct NucleusTruth {
  int id = 0;
  double x_px = 0.0;
  double y_px = 0.0;
  double area_um2 = 0.0;  // analytic ellipse area
  double area_px = 0.0;   // rasterized coverage, sum of per-pixel fractions
  double semi_major_px = 0.0;
  double semi_minor_px = 0.0;
  double angle_rad = 0.0;
  bool sampled = false;
};

struct GroundTruth {
  int region_id = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<NucleusTruth> nuclei;
};

struct SyntheticRegion {
  Image image;
  GroundTruth truth;
};

namespace detail {

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;

  // Normalized radius: 1 on the boundary.
  double radius(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = (dx * cos_t + dy * sin_t) / a;
    const double v = (-dx * sin_t + dy * cos_t) / b;
    return std::sqrt(u * u + v * v);
  }
};

/// Fraction of the unit pixel centered at (x, y) covered by `e`, with 8x8
/// supersampling near the boundary. The distance from a point at normalized
/// radius r to the boundary is at least |r - 1| * b.
inline double pixel_coverage(const Ellipse& e, double x, double y) {
  const double r = e.radius(x, y);
  const double margin = 0.75 / e.b;
  if (r < 1.0 - margin) return 1.0;
  if (r > 1.0 + margin) return 0.0;
  constexpr int n = 8;
  int inside = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      inside += e.radius(x - 0.5 + (j + 0.5) / n, y - 0.5 + (i + 0.5) / n) <= 1.0;
  return static_cast<double>(inside) / (n * n);
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace detail

/// Renders one region. Placement makes at most 10 * nucleus_count attempts
/// before giving up with the achieved count.
inline SyntheticRegion generate_region(const SyntheticRegionSpec& spec, Rng& rng, int region_id = 0) {
  spec.validate();
  const std::size_t size = spec.image_px;
  const auto isize = static_cast<std::ptrdiff_t>(size);
  SyntheticRegion region{make_image(size, size), {region_id, size, size, {}}};
  Image& img = region.image;

  // Stroma: coarse value noise, bilinearly upsampled, plus per-pixel grain.
  const auto cells = static_cast<std::size_t>(std::ceil(static_cast<double>(size) / spec.stroma_scale_px)) + 2;
  std::vector<double> coarse(cells * cells);
  for (auto& v : coarse) v = rng.uniform(-1.0, 1.0);
  for (std::size_t y = 0; y < size; ++y) {
    const double gy = static_cast<double>(y) / spec.stroma_scale_px;
    const auto iy = static_cast<std::size_t>(gy);
    const double ty = gy - static_cast<double>(iy);
    for (std::size_t x = 0; x < size; ++x) {
      const double gx = static_cast<double>(x) / spec.stroma_scale_px;
      const auto ix = static_cast<std::size_t>(gx);
      const double tx = gx - static_cast<double>(ix);
      const double n = (1 - ty) * ((1 - tx) * coarse[iy * cells + ix] + tx * coarse[iy * cells + ix + 1]) +
                       ty * ((1 - tx) * coarse[(iy + 1) * cells + ix] + tx * coarse[(iy + 1) * cells + ix + 1]);
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(
            detail::clamp01(spec.stroma_color[c] + spec.stroma_noise * n + spec.pixel_noise * rng.normal()));
    }
  }

  // Occupancy of nuclei dilated by half the gap, for the non-overlap test.
  std::vector<std::uint8_t> occupied(size * size, 0);
  const std::size_t max_attempts = 10 * spec.nucleus_count;
  std::size_t attempts = 0;
  const double mu = std::log(spec.area_median_um2);

  for (std::size_t k = 0; k < spec.nucleus_count; ++k) {
    double area = 0.0;
    do {
      area = std::exp(mu + spec.area_sigma_log * rng.normal());
    } while (area < spec.area_min_um2 || area > spec.area_max_um2);
    const double ecc = rng.uniform(spec.eccentricity_min, spec.eccentricity_max);
    const double area_px = um2_to_px(area);
    const double a = std::sqrt(area_px * ecc / std::numbers::pi);
    const double b = std::sqrt(area_px / (std::numbers::pi * ecc));
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double half_gap = 0.5 * spec.min_gap_px;
    const double reach = a + half_gap + 2.0;
    if (2.0 * reach >= static_cast<double>(size))
      throw ConfigError("synthetic image too small for a nucleus of " + std::to_string(area) + " um^2");

    bool placed = false;
    detail::Ellipse e{};
    std::ptrdiff_t x_lo = 0, x_hi = 0, y_lo = 0, y_hi = 0;
    while (!placed && attempts < max_attempts) {
      ++attempts;
      const double cx = rng.uniform(reach, static_cast<double>(size) - reach);
      const double cy = rng.uniform(reach, static_cast<double>(size) - reach);
      const detail::Ellipse grown{cx, cy, a + half_gap, b + half_gap, std::cos(theta), std::sin(theta)};
      x_lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::floor(cx - reach)));
      x_hi = std::min<std::ptrdiff_t>(isize - 1, static_cast<std::ptrdiff_t>(std::ceil(cx + reach)));
      y_lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::floor(cy - reach)));
      y_hi = std::min<std::ptrdiff_t>(isize - 1, static_cast<std::ptrdiff_t>(std::ceil(cy + reach)));
      bool clash = false;
      for (auto y = y_lo; y <= y_hi && !clash; ++y)
        for (auto x = x_lo; x <= x_hi; ++x)
          if (occupied[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] &&
              grown.radius(static_cast<double>(x), static_cast<double>(y)) <= 1.0 + 1.0 / grown.b) {
            clash = true;
            break;
          }
      if (clash) continue;
      for (auto y = y_lo; y <= y_hi; ++y)
        for (auto x = x_lo; x <= x_hi; ++x)
          if (grown.radius(static_cast<double>(x), static_cast<double>(y)) <= 1.0 + 1.0 / grown.b)
            occupied[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] = 1;
      e = {cx, cy, a, b, std::cos(theta), std::sin(theta)};
      placed = true;
    }
    if (!placed)
      throw DataError("nucleus placement failed: placed " + std::to_string(region.truth.nuclei.size()) + " of " +
                      std::to_string(spec.nucleus_count) + " within " + std::to_string(max_attempts) + " attempts");

    std::array<double, 3> color{};
    for (std::size_t c = 0; c < 3; ++c)
      color[c] = spec.nucleus_color[c] + spec.nucleus_jitter * rng.uniform(-1.0, 1.0);
    double coverage_sum = 0.0;
    for (auto y = y_lo; y <= y_hi; ++y)
      for (auto x = x_lo; x <= x_hi; ++x) {
        const double cov = detail::pixel_coverage(e, static_cast<double>(x), static_cast<double>(y));
        if (cov <= 0.0) continue;
        coverage_sum += cov;
        const double grain = spec.nucleus_texture * rng.normal();
        for (std::size_t c = 0; c < 3; ++c) {
          float& px = img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
          px = static_cast<float>(detail::clamp01((1.0 - cov) * px + cov * (color[c] + grain)));
        }
      }
    region.truth.nuclei.push_back(
        {static_cast<int>(k), e.cx, e.cy, area, coverage_sum, a, b, theta, false});
  }
  return region;
}

/// Stereological sampling: the image is tiled by ceil(sqrt(n))^2 equal cells
/// shifted by one random offset (wrapping around the image); cells are
/// visited in random order and each contributes the nucleus closest to its
/// center. Further passes take the next-closest nucleus until n are chosen.
inline void systematic_random_sample(GroundTruth& truth, std::size_t n, Rng& rng) {
  if (n > truth.nuclei.size())
    throw DataError("cannot sample " + std::to_string(n) + " of " + std::to_string(truth.nuclei.size()) + " nuclei");
  for (auto& nu : truth.nuclei) nu.sampled = false;
  if (n == 0) return;
  const auto k = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const double cw = static_cast<double>(truth.width) / static_cast<double>(k);
  const double ch = static_cast<double>(truth.height) / static_cast<double>(k);
  const double ox = rng.uniform(0.0, cw), oy = rng.uniform(0.0, ch);
  const double w = static_cast<double>(truth.width), h = static_cast<double>(truth.height);

  // Per cell: member indices sorted by (wrapped) distance to the cell center.
  std::vector<std::vector<std::pair<double, std::size_t>>> members(k * k);
  for (std::size_t i = 0; i < truth.nuclei.size(); ++i) {
    const double sx = std::fmod(truth.nuclei[i].x_px - ox + w, w);
    const double sy = std::fmod(truth.nuclei[i].y_px - oy + h, h);
    const auto col = std::min(k - 1, static_cast<std::size_t>(sx / cw));
    const auto row = std::min(k - 1, static_cast<std::size_t>(sy / ch));
    const double dx = sx - (static_cast<double>(col) + 0.5) * cw;
    const double dy = sy - (static_cast<double>(row) + 0.5) * ch;
    members[row * k + col].push_back({dx * dx + dy * dy, i});
  }
  for (auto& m : members) std::sort(m.begin(), m.end());
  std::vector<std::size_t> order(k * k);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());

  std::size_t chosen = 0;
  for (std::size_t pass = 0; chosen < n; ++pass)
    for (std::size_t cell : order) {
      if (chosen == n) break;
      if (pass < members[cell].size()) {
        truth.nuclei[members[cell][pass].second].sampled = true;
        ++chosen;
      }
    }
}

// -- cohort ---------------------------------------------------------------------

enum class Subset { A1, A2, B };

inline std::string subset_name(Subset s) {
  switch (s) {
    case Subset::A1: return "A1";
    case Subset::A2: return "A2";
    case Subset::B: return "B";
  }
  return "?";
}

inline Subset parse_subset(const std::string& s) {
  if (s == "A1") return Subset::A1;
  if (s == "A2") return Subset::A2;
  if (s == "B") return Subset::B;
  throw DataError("unknown subset '" + s + "'");
}

struct CohortSpec {
  SyntheticRegionSpec region;
  std::size_t sampled_per_region = 100;
  // Region-count factor against the 14 / 7 / 18 split; each subset gets
  // max(1, round(count * factor)) regions.
  double region_factor = 1.0;
  std::uint64_t seed = 1;
};

struct CohortRegion {
  int region_id = 0;
  Subset subset = Subset::A1;
  std::uint64_t seed = 0;
};

inline std::size_t scaled_subset_size(std::size_t full, double factor) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(full) * factor)));
}

/// Region list with the training / validation / test split. Ids start at 1;
/// A1 regions come first, then A2, then B.
inline std::vector<CohortRegion> build_cohort(const CohortSpec& spec) {
  if (!(spec.region_factor > 0.0)) throw ConfigError("cohort region factor must be positive");
  std::vector<CohortRegion> regions;
  int id = 1;
  for (auto [subset, full] : {std::pair{Subset::A1, 14}, std::pair{Subset::A2, 7}, std::pair{Subset::B, 18}}) {
    const auto n = scaled_subset_size(static_cast<std::size_t>(full), spec.region_factor);
    for (std::size_t i = 0; i < n; ++i, ++id)
      regions.push_back({id, subset, derive_seed(spec.seed, {0xC0407, static_cast<std::uint64_t>(id)})});
  }
  return regions;
}

/// Generates one cohort region and marks its systematic random sample.
inline SyntheticRegion generate_cohort_region(const CohortSpec& spec, const CohortRegion& r) {
  Rng rng(r.seed);
  auto region = generate_region(spec.region, rng, r.region_id);
  Rng sampler(derive_seed(r.seed, {0x5A3B}));
  systematic_random_sample(region.truth, std::min(spec.sampled_per_region, region.truth.nuclei.size()), sampler);
  return region;
}

}  // namespace nuclearea
