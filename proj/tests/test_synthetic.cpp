#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "nuclearea/binning.hpp"
#include "nuclearea/synthetic.hpp"

using namespace nuclearea;

namespace {

SyntheticRegionSpec small_spec(std::size_t count) {
  SyntheticRegionSpec s;
  s.image_px = 256;
  s.nucleus_count = count;
  return s;
}

// Counts pixels whose center lies inside the ellipse, independent of the
// generator's coverage routine.
double center_count_oracle(const NucleusTruth& n) {
  const double c = std::cos(n.angle_rad), s = std::sin(n.angle_rad);
  double count = 0;
  const int r = static_cast<int>(n.semi_major_px) + 2;
  const int cx = static_cast<int>(n.x_px), cy = static_cast<int>(n.y_px);
  for (int y = cy - r; y <= cy + r; ++y)
    for (int x = cx - r; x <= cx + r; ++x) {
      const double dx = x - n.x_px, dy = y - n.y_px;
      const double u = (dx * c + dy * s) / n.semi_major_px, v = (-dx * s + dy * c) / n.semi_minor_px;
      count += (u * u + v * v) <= 1.0;
    }
  return count;
}

}  // namespace

TEST(GenerateRegion, ZeroCountGivesBackgroundOnly) {
  Rng rng(1);
  const auto r = generate_region(small_spec(0), rng);
  EXPECT_TRUE(r.truth.nuclei.empty());
  EXPECT_EQ(image_width(r.image), 256u);
  for (float v : r.image.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(GenerateRegion, CircleOf100SquareMicronsCoversAbout1600Pixels) {
  auto spec = small_spec(1);
  spec.area_min_um2 = 99.999;
  spec.area_max_um2 = 100.001;
  spec.area_median_um2 = 100.0;
  spec.area_sigma_log = 0.0;
  spec.eccentricity_max = 1.0;
  Rng rng(2);
  const auto r = generate_region(spec, rng);
  ASSERT_EQ(r.truth.nuclei.size(), 1u);
  const auto& n = r.truth.nuclei[0];
  EXPECT_NEAR(n.area_um2, 100.0, 1e-3);
  EXPECT_NEAR(center_count_oracle(n), 1600.0, 0.05 * 1600.0);
  EXPECT_NEAR(n.area_px, 1600.0, 0.05 * 1600.0);
}

TEST(GenerateRegion, RasterizedAreaTracksAnalyticArea) {
  Rng rng(3);
  const auto r = generate_region(small_spec(12), rng);
  ASSERT_EQ(r.truth.nuclei.size(), 12u);
  for (const auto& n : r.truth.nuclei) {
    EXPECT_NEAR(std::numbers::pi * n.semi_major_px * n.semi_minor_px * kSquareMicronsPerPixel, n.area_um2,
                1e-9 * n.area_um2);
    const double rel = std::abs(px_to_um2(n.area_px) - n.area_um2) / n.area_um2;
    EXPECT_LE(rel, n.area_um2 > 50.0 ? 0.02 : 0.05) << n.area_um2;
    EXPECT_GE(n.area_um2, 16.6);
    EXPECT_LE(n.area_um2, 151.8);
  }
}

TEST(GenerateRegion, NucleiDoNotOverlap) {
  Rng rng(4);
  const auto spec = small_spec(15);
  const auto r = generate_region(spec, rng);
  // Rasterized-mask disjointness via pixel-center membership.
  std::vector<int> owner(spec.image_px * spec.image_px, -1);
  for (const auto& n : r.truth.nuclei) {
    const double c = std::cos(n.angle_rad), s = std::sin(n.angle_rad);
    for (std::size_t y = 0; y < spec.image_px; ++y)
      for (std::size_t x = 0; x < spec.image_px; ++x) {
        const double dx = x - n.x_px, dy = y - n.y_px;
        const double u = (dx * c + dy * s) / n.semi_major_px, v = (-dx * s + dy * c) / n.semi_minor_px;
        if (u * u + v * v <= 1.0) {
          ASSERT_EQ(owner[y * spec.image_px + x], -1) << "nuclei " << owner[y * spec.image_px + x] << " and " << n.id;
          owner[y * spec.image_px + x] = n.id;
        }
      }
  }
  for (std::size_t i = 0; i < r.truth.nuclei.size(); ++i)
    for (std::size_t j = i + 1; j < r.truth.nuclei.size(); ++j)
      EXPECT_GE(std::hypot(r.truth.nuclei[i].x_px - r.truth.nuclei[j].x_px,
                           r.truth.nuclei[i].y_px - r.truth.nuclei[j].y_px),
                spec.min_gap_px);
}

TEST(GenerateRegion, SameSeedIsBitIdentical) {
  Rng a(5), b(5);
  const auto ra = generate_region(small_spec(20), a);
  const auto rb = generate_region(small_spec(20), b);
  EXPECT_TRUE(ra.image == rb.image);
  ASSERT_EQ(ra.truth.nuclei.size(), rb.truth.nuclei.size());
  for (std::size_t i = 0; i < ra.truth.nuclei.size(); ++i) {
    EXPECT_EQ(ra.truth.nuclei[i].x_px, rb.truth.nuclei[i].x_px);
    EXPECT_EQ(ra.truth.nuclei[i].area_px, rb.truth.nuclei[i].area_px);
  }
}

TEST(GenerateRegion, ImpossibleDensityRejectedWithAchievedCount) {
  auto spec = small_spec(400);
  spec.image_px = 128;
  Rng rng(6);
  try {
    generate_region(spec, rng);
    FAIL() << "expected placement failure";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("placed"), std::string::npos);
  }
}

TEST(GenerateRegion, MeanOfHundredAreasMatchesSummationOracle) {
  auto spec = small_spec(100);
  spec.image_px = 640;
  Rng rng(7);
  const auto r = generate_region(spec, rng);
  std::vector<AreaMeasurement> ms;
  long double oracle = 0;
  for (const auto& n : r.truth.nuclei) {
    ms.push_back({0, n.id, n.x_px, n.y_px, n.area_um2});
    oracle += n.area_um2;
  }
  oracle /= r.truth.nuclei.size();
  EXPECT_NEAR(mean_nuclear_area(ms).mna_um2, static_cast<double>(oracle), 1e-9);
}

TEST(SystematicSampling, AllSelectedWhenNEqualsCount) {
  Rng rng(8);
  auto r = generate_region(small_spec(12), rng);
  systematic_random_sample(r.truth, 12, rng);
  for (const auto& n : r.truth.nuclei) EXPECT_TRUE(n.sampled);
}

TEST(SystematicSampling, GridPopulationGivesOnePerCell) {
  GroundTruth t{0, 1000, 1000, {}};
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j)
      for (int extra = 0; extra < 3; ++extra)
        t.nuclei.push_back({static_cast<int>(t.nuclei.size()), 100.0 * j + 20.0 + 25.0 * extra, 100.0 * i + 50.0,
                            50.0, 800.0, 5, 5, 0, false});
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    systematic_random_sample(t, 100, rng);
    // Offset cells straddle two triplets, so a triplet holds at most two picks.
    std::size_t selected = 0;
    std::vector<int> per_group(100, 0);
    for (const auto& n : t.nuclei)
      if (n.sampled) {
        ++selected;
        ++per_group[static_cast<std::size_t>(n.id / 3)];
      }
    EXPECT_EQ(selected, 100u);
    for (int g : per_group) EXPECT_LE(g, 2);
  }
}

TEST(SystematicSampling, ExactGridBijection) {
  GroundTruth t{0, 1000, 1000, {}};
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j)
      t.nuclei.push_back({i * 10 + j, 100.0 * j + 50.0, 100.0 * i + 50.0, 50.0, 800.0, 5, 5, 0, false});
  Rng rng(11);
  systematic_random_sample(t, 100, rng);
  for (const auto& n : t.nuclei) EXPECT_TRUE(n.sampled);
}

TEST(SystematicSampling, RejectsOversizedRequest) {
  GroundTruth t{0, 100, 100, {}};
  t.nuclei.push_back({});
  Rng rng(1);
  EXPECT_THROW(systematic_random_sample(t, 2, rng), DataError);
}

TEST(SystematicSampling, SampledMnaTracksPopulation) {
  auto spec = small_spec(500);
  spec.image_px = 1600;
  Rng gen(12);
  auto r = generate_region(spec, gen);
  double pop = 0;
  for (const auto& n : r.truth.nuclei) pop += n.area_um2;
  pop /= r.truth.nuclei.size();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    systematic_random_sample(r.truth, 100, rng);
    double sum = 0;
    std::size_t n = 0;
    for (const auto& nu : r.truth.nuclei)
      if (nu.sampled) {
        sum += nu.area_um2;
        ++n;
      }
    ASSERT_EQ(n, 100u);
    EXPECT_NEAR(sum / n, pop, 0.15 * pop);
  }
}

TEST(Cohort, FullSplit) {
  const auto c = build_cohort({});
  ASSERT_EQ(c.size(), 39u);
  std::size_t counts[3] = {};
  for (const auto& r : c) ++counts[static_cast<int>(r.subset)];
  EXPECT_EQ(counts[0], 14u);
  EXPECT_EQ(counts[1], 7u);
  EXPECT_EQ(counts[2], 18u);
}

TEST(Cohort, DeskFactorGivesTwoOneThree) {
  CohortSpec s;
  s.region_factor = 1.0 / 7.0;
  const auto c = build_cohort(s);
  std::size_t counts[3] = {};
  for (const auto& r : c) ++counts[static_cast<int>(r.subset)];
  EXPECT_EQ(counts[0], 2u);
  EXPECT_EQ(counts[1], 1u);
  EXPECT_EQ(counts[2], 3u);
}

TEST(Cohort, SeedDetermined) {
  CohortSpec s;
  s.seed = 77;
  const auto a = build_cohort(s), b = build_cohort(s);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].seed, b[i].seed);
  s.seed = 78;
  EXPECT_NE(build_cohort(s)[0].seed, a[0].seed);
}
