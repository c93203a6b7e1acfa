#pragma once

// Training sample generation: nucleus-centered patches replicated under
// random geometric and color transforms, with the class label following the
// scale factor, and background patches drawn away from known nuclei.
//
// The augmented pool is virtual. Sample i is a pure function of the pool
// seed and i, rendered on demand from the source image, so a pool of 1.4M
// samples costs a few bytes per source nucleus.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "nuclearea/binning.hpp"
#include "nuclearea/error.hpp"
#include "nuclearea/image.hpp"
#include "nuclearea/rng.hpp"

namespace nuclearea {

struct AugmentConfig {
  std::size_t patch_px = 96;
  double translation_px = 6.0;
  double scale_min = 0.75;
  double scale_max = 1.3;
  double reflect_prob = 0.5;
  double gain_range = 0.1;     // per-channel gain in [1 - r, 1 + r]
  double offset_range = 0.05;  // per-channel offset in [-r, r]
  double contrast_range = 0.1;
  std::size_t replicates = 1000;
  std::size_t max_scale_redraws = 10;

  void validate() const {
    if (!(scale_min > 0.0 && scale_min <= scale_max)) throw ConfigError("augment scale range must be positive");
    if (!(translation_px >= 0.0 && translation_px < static_cast<double>(patch_px) / 4.0))
      throw ConfigError("augment translation must be below patch_px / 4");
    if (replicates == 0) throw ConfigError("augment replicates must be positive");
    if (!(reflect_prob >= 0.0 && reflect_prob <= 1.0)) throw ConfigError("reflection probability outside [0, 1]");
  }
};

struct AnnotatedNucleus {
  int region_id = 0;
  int nucleus_id = 0;
  double x_px = 0.0;
  double y_px = 0.0;
  double area_um2 = 0.0;
};

struct PatchSample {
  Tensor<float> pixels;
  std::size_t label = 0;
  std::optional<double> area_um2;  // absent for background
};

inline std::size_t background_label(const AreaBinning& b) { return b.n_bins; }

/// Indexed collection of training samples.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual PatchSample sample(std::size_t i) const = 0;
};

class VectorSource : public SampleSource {
 public:
  explicit VectorSource(std::vector<PatchSample> samples) : samples_(std::move(samples)) {}
  std::size_t size() const override { return samples_.size(); }
  PatchSample sample(std::size_t i) const override { return samples_.at(i); }
  const std::vector<PatchSample>& samples() const { return samples_; }

 private:
  std::vector<PatchSample> samples_;
};

struct AugmentDraw {
  double tx = 0.0, ty = 0.0;
  double angle = 0.0;
  bool flip_x = false, flip_y = false;
  double scale = 1.0;
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> offset{0.0, 0.0, 0.0};
  double contrast = 1.0;
};

/// Everything except the scale, which depends on the label policy.
inline AugmentDraw draw_transform(Rng& rng, const AugmentConfig& cfg) {
  AugmentDraw d;
  d.tx = rng.uniform(-cfg.translation_px, cfg.translation_px);
  d.ty = rng.uniform(-cfg.translation_px, cfg.translation_px);
  d.angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  d.flip_x = rng.bernoulli(cfg.reflect_prob);
  d.flip_y = rng.bernoulli(cfg.reflect_prob);
  for (std::size_t c = 0; c < 3; ++c) {
    d.gain[c] = rng.uniform(1.0 - cfg.gain_range, 1.0 + cfg.gain_range);
    d.offset[c] = rng.uniform(-cfg.offset_range, cfg.offset_range);
  }
  d.contrast = rng.uniform(1.0 - cfg.contrast_range, 1.0 + cfg.contrast_range);
  return d;
}

/// Uniform scale whose area stays inside the binning range; after
/// max_scale_redraws failures the scale is 1.
inline double draw_scale(double area_um2, Rng& rng, const AugmentConfig& cfg, const AreaBinning& b) {
  for (std::size_t i = 0; i < cfg.max_scale_redraws; ++i) {
    const double s = rng.uniform(cfg.scale_min, cfg.scale_max);
    const double a = area_um2 * s * s;
    if (a >= b.a_min && a <= b.a_max) return s;
  }
  return 1.0;
}

/// Scale for class balancing: a target bin is chosen uniformly among the
/// bins reachable within the scale range, then a target area uniformly
/// within the reachable part of that bin.
inline double draw_balanced_scale(double area_um2, Rng& rng, const AugmentConfig& cfg, const AreaBinning& b) {
  const double lo = std::max(b.a_min, area_um2 * cfg.scale_min * cfg.scale_min);
  const double hi = std::min(b.a_max, area_um2 * cfg.scale_max * cfg.scale_max);
  if (!(lo < hi)) return 1.0;
  const std::size_t first = quantize(lo, b), last = quantize(hi, b);
  const std::size_t bin = first + rng.uniform_index(last - first + 1);
  const auto [edge_lo, edge_hi] = bin_edges(bin, b);
  const double target = rng.uniform(std::max(lo, edge_lo), std::min(hi, edge_hi));
  return std::sqrt(target / area_um2);
}

/// Renders the transformed neighbourhood of (cx, cy). The forward map takes a
/// source offset through reflection, rotation, scaling and translation; each
/// output pixel is pulled back through the inverse and bilinearly sampled.
/// Color: v' = gain * v + offset, then contrast about the channel mean,
/// clamped to [0, 1].
inline Tensor<float> render_patch(const Image& image, double cx, double cy, const AugmentDraw& d, std::size_t patch_px) {
  if (!(cx >= 0.0 && cy >= 0.0 && cx < static_cast<double>(image_width(image)) &&
        cy < static_cast<double>(image_height(image))))
    throw DataError("patch center outside the image");
  Tensor<float> out({3, patch_px, patch_px});
  const double half = static_cast<double>(patch_px / 2);
  const double ox = std::round(cx), oy = std::round(cy);
  const double cos_t = std::cos(d.angle), sin_t = std::sin(d.angle);
  const double inv_s = 1.0 / d.scale;
  for (std::size_t r = 0; r < patch_px; ++r)
    for (std::size_t q = 0; q < patch_px; ++q) {
      const double px = (static_cast<double>(q) - half - d.tx) * inv_s;
      const double py = (static_cast<double>(r) - half - d.ty) * inv_s;
      double ux = cos_t * px + sin_t * py;
      double uy = -sin_t * px + cos_t * py;
      if (d.flip_x) ux = -ux;
      if (d.flip_y) uy = -uy;
      for (std::size_t c = 0; c < 3; ++c) out.at(c, r, q) = sample_bilinear(image, c, ox + ux, oy + uy);
    }
  const std::size_t plane = patch_px * patch_px;
  for (std::size_t c = 0; c < 3; ++c) {
    float* v = out.data() + c * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      v[i] = static_cast<float>(d.gain[c] * v[i] + d.offset[c]);
      mean += v[i];
    }
    mean /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i)
      v[i] = static_cast<float>(std::clamp(mean + d.contrast * (v[i] - mean), 0.0, 1.0));
  }
  return out;
}

/// Random augmentation of a nucleus taken from its source image.
inline PatchSample augment(const Image& image, const AnnotatedNucleus& n, Rng& rng, const AugmentConfig& cfg,
                           const AreaBinning& b) {
  AugmentDraw d = draw_transform(rng, cfg);
  d.scale = draw_scale(n.area_um2, rng, cfg, b);
  const double area = n.area_um2 * d.scale * d.scale;
  return {render_patch(image, n.x_px, n.y_px, d, cfg.patch_px), quantize(area, b), area};
}

/// Random augmentation of an existing patch; content beyond the patch is
/// mirrored.
inline PatchSample augment(const PatchSample& s, Rng& rng, const AugmentConfig& cfg, const AreaBinning& b) {
  if (!s.area_um2) throw DataError("cannot rescale a background sample");
  const double c = static_cast<double>(s.pixels.dim(1) / 2);
  return augment(s.pixels, AnnotatedNucleus{0, 0, c, c, *s.area_um2}, rng, cfg, b);
}

/// Uniform centers at distance > exclusion_radius from every centroid.
/// Rejection sampling; an empty feasible region is detected up front on the
/// pixel grid.
inline std::vector<std::pair<double, double>> sample_background_centers(
    std::size_t width, std::size_t height, const std::vector<std::pair<double, double>>& centroids, std::size_t n,
    double exclusion_radius, Rng& rng) {
  if (exclusion_radius < 0.0) throw ConfigError("exclusion radius must be non-negative");
  const double r2 = exclusion_radius * exclusion_radius;
  auto feasible = [&](double x, double y) {
    for (const auto& [cx, cy] : centroids)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r2) return false;
    return true;
  };
  std::vector<std::pair<double, double>> out;
  if (n == 0) return out;
  bool any = false;
  for (std::size_t y = 0; y < height && !any; ++y)
    for (std::size_t x = 0; x < width && !any; ++x) any = feasible(static_cast<double>(x), static_cast<double>(y));
  if (!any) throw DataError("background sampling: no location farther than the exclusion radius from all nuclei");
  out.reserve(n);
  while (out.size() < n) {
    const double x = rng.uniform(0.0, static_cast<double>(width));
    const double y = rng.uniform(0.0, static_cast<double>(height));
    if (feasible(x, y)) out.emplace_back(x, y);
  }
  return out;
}

inline std::vector<PatchSample> sample_background(const Image& image,
                                                  const std::vector<std::pair<double, double>>& centroids,
                                                  std::size_t n, double exclusion_radius, Rng& rng,
                                                  std::size_t patch_px, const AreaBinning& b) {
  std::vector<PatchSample> out;
  for (const auto& [x, y] :
       sample_background_centers(image_width(image), image_height(image), centroids, n, exclusion_radius, rng))
    out.push_back({extract_patch(image, x, y, patch_px), background_label(b), std::nullopt});
  return out;
}

// -- pool -----------------------------------------------------------------------

struct PoolSource {
  std::size_t image = 0;  // index into the pool's image list
  double x_px = 0.0;
  double y_px = 0.0;
  double area_um2 = 0.0;  // 0 for background
  int region_id = 0;
  int item_id = 0;
};

/// Virtual pool of replicates · |nuclei| augmented nucleus samples followed
/// by one augmented sample per background center. Background samples get
/// the same transforms; their label never changes.
class AugmentedPool : public SampleSource {
 public:
  AugmentedPool(const std::vector<Image>* images, std::vector<PoolSource> nuclei, std::vector<PoolSource> backgrounds,
                AugmentConfig cfg, AreaBinning binning, std::uint64_t seed, bool balanced)
      : images_(images),
        nuclei_(std::move(nuclei)),
        backgrounds_(std::move(backgrounds)),
        cfg_(cfg),
        binning_(binning),
        seed_(seed),
        balanced_(balanced) {
    cfg_.validate();
    binning_.validate();
    if (nuclei_.empty()) throw DataError("augmented pool needs at least one nucleus");
    for (const auto& s : nuclei_)
      if (!(s.area_um2 > 0.0)) throw DataError("nucleus without a positive area in the training set");
  }

  std::size_t size() const override { return nuclei_.size() * cfg_.replicates + backgrounds_.size(); }
  std::size_t nucleus_samples() const { return nuclei_.size() * cfg_.replicates; }
  const AugmentConfig& config() const { return cfg_; }

  /// Transform and label of sample i, without rendering.
  std::pair<AugmentDraw, PatchSample> plan(std::size_t i) const {
    const auto [src, is_bg] = source(i);
    Rng rng = stream(i);
    AugmentDraw d = draw_transform(rng, cfg_);
    PatchSample s;
    if (is_bg) {
      d.scale = rng.uniform(cfg_.scale_min, cfg_.scale_max);
      s.label = background_label(binning_);
    } else {
      d.scale = balanced_ ? draw_balanced_scale(src.area_um2, rng, cfg_, binning_)
                          : draw_scale(src.area_um2, rng, cfg_, binning_);
      s.area_um2 = src.area_um2 * d.scale * d.scale;
      s.label = quantize(*s.area_um2, binning_);
    }
    return {d, std::move(s)};
  }

  std::size_t label(std::size_t i) const { return plan(i).second.label; }

  PatchSample sample(std::size_t i) const override {
    auto [d, s] = plan(i);
    const auto& src = source(i).first;
    s.pixels = render_patch((*images_)[src.image], src.x_px, src.y_px, d, cfg_.patch_px);
    return s;
  }

 private:
  std::pair<const PoolSource&, bool> source(std::size_t i) const {
    if (i >= size()) throw DataError("pool index out of range");
    if (i < nucleus_samples()) return {nuclei_[i / cfg_.replicates], false};
    return {backgrounds_[i - nucleus_samples()], true};
  }

  // Per-replicate stream keyed by (region, item, replicate) so that a sample
  // does not depend on the pool's composition or on scheduling.
  Rng stream(std::size_t i) const {
    if (i < nucleus_samples()) {
      const auto& s = nuclei_[i / cfg_.replicates];
      return Rng(derive_seed(seed_, {0xA06, static_cast<std::uint64_t>(s.region_id),
                                     static_cast<std::uint64_t>(s.item_id), i % cfg_.replicates}));
    }
    const auto& s = backgrounds_[i - nucleus_samples()];
    return Rng(derive_seed(seed_, {0xB06, static_cast<std::uint64_t>(s.region_id), static_cast<std::uint64_t>(s.item_id)}));
  }

  const std::vector<Image>* images_;
  std::vector<PoolSource> nuclei_;
  std::vector<PoolSource> backgrounds_;
  AugmentConfig cfg_;
  AreaBinning binning_;
  std::uint64_t seed_;
  bool balanced_;
};

/// Class histogram of a pool (background in the last slot).
inline std::vector<std::size_t> label_histogram(const AugmentedPool& pool, const AreaBinning& b) {
  std::vector<std::size_t> h(b.n_bins + 1, 0);
  for (std::size_t i = 0; i < pool.size(); ++i) ++h[pool.label(i)];
  return h;
}

}  // namespace nuclearea
