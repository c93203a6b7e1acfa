#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "nuclearea/commands.hpp"

namespace na = nuclearea;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("nuclearea_cmd_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

// A cohort small enough to train on in milliseconds.
na::CommonOptions tiny(const fs::path& out) {
  na::CommonOptions o;
  o.out = out.string();
  o.log = nullptr;
  o.deterministic = true;
  o.config.apply_text(R"(
    synth.image_px = 256
    synth.nucleus_count = 8
    synth.sampled_per_region = 4
    augment.replicates = 2
    background.per_region = 4
    train.batch_size = 2
    train.iterations_area = 2
    train.iterations_combined = 2
    train.eval_interval = 1
    detect.stride = 16
  )",
                      "test");
  return o;
}

struct Pipeline {
  fs::path root;
  std::string cohort, model;
  na::CommonOptions opts;

  explicit Pipeline(const std::string& name) : root(scratch(name)), opts(tiny(root)) {
    cohort = (root / "cohort").string();
    model = (root / "model").string();
    auto o = opts;
    o.out = cohort;
    na::cmd_synth(o);
  }

  na::CommonOptions at(const std::string& sub) const {
    auto o = opts;
    o.out = (root / sub).string();
    return o;
  }

  ~Pipeline() { fs::remove_all(root); }
};

std::string slurp(const std::string& path) { return na::detail::read_file(path); }

}  // namespace

TEST(Config, DeskDefaults) {
  na::RunConfig c(na::Profile::desk);
  EXPECT_EQ(c.count("synth.image_px"), 512u);
  EXPECT_EQ(c.count("synth.nucleus_count"), 60u);
  EXPECT_EQ(c.count("augment.replicates"), 200u);
  EXPECT_EQ(c.count("train.batch_size"), 64u);
  EXPECT_EQ(c.count("train.iterations_area"), 2000u);
  EXPECT_EQ(c.count("train.iterations_combined"), 3000u);
  EXPECT_EQ(c.augment().patch_px, 96u);
}

TEST(Config, PaperDefaults) {
  na::RunConfig c(na::Profile::paper);
  EXPECT_EQ(c.count("train.iterations_area"), 25000u);
  EXPECT_EQ(c.count("train.iterations_combined"), 40000u);
  EXPECT_EQ(c.count("augment.replicates"), 1000u);
  EXPECT_EQ(c.count("train.batch_size"), 256u);
  EXPECT_DOUBLE_EQ(c.real("train.base_lr"), 0.01);
  EXPECT_DOUBLE_EQ(c.real("train.weight_decay"), 0.001);
}

TEST(Config, UnknownKeyAndBadValueAreConfigErrors) {
  na::RunConfig c;
  EXPECT_THROW(c.set("train.learning_rate", "1"), na::ConfigError);
  EXPECT_THROW(c.apply_text("no equals sign", "t"), na::ConfigError);
  c.set("train.batch_size", "abc");
  EXPECT_THROW(c.train(false), na::ConfigError);
  EXPECT_THROW(na::parse_profile("laptop"), na::ConfigError);
}

TEST(Config, TextOverridesAreRecorded) {
  na::RunConfig c;
  c.apply_text("# comment\n\n seed = 7  # trailing\n", "t");
  EXPECT_EQ(c.u64("seed"), 7u);
  EXPECT_TRUE(c.is_overridden("seed"));
  EXPECT_FALSE(c.is_overridden("train.batch_size"));
}

TEST(Synth, DeskCohortHasTwoOneThreeRegions) {
  const auto root = scratch("desk");
  na::CommonOptions o;
  o.out = root.string();
  o.log = nullptr;
  o.config.set("synth.image_px", "256");
  o.config.set("synth.nucleus_count", "8");
  const auto s = na::cmd_synth(o);
  EXPECT_EQ(s.regions, 6u);
  EXPECT_EQ(s.a1, 2u);
  EXPECT_EQ(s.a2, 1u);
  EXPECT_EQ(s.b, 3u);
  EXPECT_EQ(na::load_cohort_index(root.string()).size(), 6u);
  fs::remove_all(root);
}

TEST(Synth, PaperCohortHasThirtyNineRegions) {
  const auto c = na::build_cohort(na::RunConfig(na::Profile::paper).cohort());
  std::map<na::Subset, int> n;
  for (const auto& r : c) ++n[r.subset];
  EXPECT_EQ(c.size(), 39u);
  EXPECT_EQ(n[na::Subset::A1], 14);
  EXPECT_EQ(n[na::Subset::A2], 7);
  EXPECT_EQ(n[na::Subset::B], 18);
}

TEST(Synth, RerunGivesIdenticalManifest) {
  const auto a = scratch("rerun_a"), b = scratch("rerun_b");
  auto oa = tiny(a), ob = tiny(b);
  EXPECT_EQ(na::cmd_synth(oa).manifest_hash, na::cmd_synth(ob).manifest_hash);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synth, OtherSeedChangesManifest) {
  const auto a = scratch("seed_a"), b = scratch("seed_b");
  auto oa = tiny(a), ob = tiny(b);
  ob.config.set("seed", "99");
  EXPECT_NE(na::cmd_synth(oa).manifest_hash, na::cmd_synth(ob).manifest_hash);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Synth, NonEmptyOutputNeedsForce) {
  const auto root = scratch("force");
  auto o = tiny(root);
  na::cmd_synth(o);
  EXPECT_THROW(na::cmd_synth(o), na::ConfigError);
  o.force = true;
  EXPECT_NO_THROW(na::cmd_synth(o));
  fs::remove_all(root);
}

TEST(Synth, TruthRoundTripsThroughDisk) {
  Pipeline p("truth");
  const auto index = na::load_cohort_index(p.cohort);
  const auto spec = p.opts.config.cohort();
  const auto regions = na::build_cohort(spec);
  const auto original = na::generate_cohort_region(spec, regions.front());
  const auto loaded = na::load_region(p.cohort, index.front());
  ASSERT_EQ(loaded.truth.nuclei.size(), original.truth.nuclei.size());
  for (std::size_t i = 0; i < loaded.truth.nuclei.size(); ++i) {
    EXPECT_EQ(loaded.truth.nuclei[i].x_px, original.truth.nuclei[i].x_px);
    EXPECT_EQ(loaded.truth.nuclei[i].area_um2, original.truth.nuclei[i].area_um2);
    EXPECT_EQ(loaded.truth.nuclei[i].sampled, original.truth.nuclei[i].sampled);
  }
  EXPECT_EQ(loaded.sampled().size(), 4u);
  const auto annotations = na::read_csv(p.cohort + "/annotations.csv");
  EXPECT_EQ(annotations.rows.size(), 6u * 4u);
}

TEST(Train, MissingCohortIsDiagnosed) {
  const auto root = scratch("nocohort");
  auto o = tiny(root);
  try {
    na::cmd_train(o, (root / "absent").string(), na::TrainMode::area);
    FAIL() << "expected DataError";
  } catch (const na::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("synth"), std::string::npos);
  }
}

TEST(Train, AreaModeWritesLoadableTwentyClassWeights) {
  Pipeline p("train_area");
  const auto s = na::cmd_train(p.at("model"), p.cohort, na::TrainMode::area);
  const auto m = na::load_model<float>(s.weights_path);
  EXPECT_EQ(m.description.config.num_classes, 20u);
  EXPECT_EQ(s.pool_size, 2u * 4u * 2u);
  EXPECT_EQ(s.validation_size, 4u);
  const auto h = na::read_csv(s.history_path);
  EXPECT_EQ(h.rows.size(), s.evaluations);
  EXPECT_EQ(h.rows.size(), 2u);
  const auto manifest = na::read_manifest(p.model + "/manifest_train_area.txt");
  EXPECT_EQ(manifest.at("mode"), "area");
  EXPECT_EQ(manifest.at("output.weights_area.nnw"), na::file_hash(s.weights_path));
}

TEST(Train, CombinedModeDeclaresTwentyOneClasses) {
  Pipeline p("train_combined");
  const auto s = na::cmd_train(p.at("model"), p.cohort, na::TrainMode::combined);
  EXPECT_EQ(na::load_model<float>(s.weights_path).description.config.num_classes, 21u);
  EXPECT_EQ(s.pool_size, 2u * 4u * 2u + 2u * 4u);
  EXPECT_EQ(s.validation_size, 4u + 4u);
}

TEST(Train, DeterministicRerunIsByteIdentical) {
  Pipeline p("train_rerun");
  const auto a = na::cmd_train(p.at("a"), p.cohort, na::TrainMode::area);
  const auto b = na::cmd_train(p.at("b"), p.cohort, na::TrainMode::area);
  EXPECT_TRUE(slurp(a.weights_path) == slurp(b.weights_path));
  EXPECT_EQ(slurp(a.history_path), slurp(b.history_path));
}

TEST(Measure, RejectsCombinedWeights) {
  Pipeline p("measure_reject");
  const auto w = na::cmd_train(p.at("model"), p.cohort, na::TrainMode::combined).weights_path;
  EXPECT_THROW(na::cmd_measure(p.at("results"), p.cohort, w), na::DataError);
}

TEST(Measure, CoversEverySampledNucleusOnceWithinCentroidRange) {
  Pipeline p("measure");
  const auto w = na::cmd_train(p.at("model"), p.cohort, na::TrainMode::area).weights_path;
  const auto s = na::cmd_measure(p.at("results"), p.cohort, w);
  const auto b = p.opts.config.binning();

  std::set<std::pair<int, int>> expected;
  for (const auto& r : na::load_subset(p.cohort, na::Subset::B))
    for (const auto* n : r.sampled()) expected.insert({r.entry.region_id, n->id});

  const auto t = na::read_csv(s.measurements_path);
  const auto rc = t.column("region_id"), nc = t.column("nucleus_id"), ac = t.column("area_auto_um2"),
             mc = t.column("area_manual_um2");
  std::set<std::pair<int, int>> seen;
  std::map<int, std::pair<double, int>> sums;
  for (const auto& row : t.rows) {
    const int region = std::stoi(row[rc]);
    EXPECT_TRUE(seen.insert({region, std::stoi(row[nc])}).second);
    const double a = std::stod(row[ac]);
    EXPECT_GE(a, na::centroid(0, b) - 1e-9);
    EXPECT_LE(a, na::centroid(b.n_bins - 1, b) + 1e-9);
    sums[region].first += a;
    sums[region].second += 1;
    (void)mc;
  }
  EXPECT_EQ(seen, expected);
  EXPECT_EQ(s.nuclei, expected.size());

  const auto mna = na::read_csv(s.mna_path);
  ASSERT_EQ(mna.rows.size(), sums.size());
  for (const auto& row : mna.rows) {
    const auto& [sum, n] = sums.at(std::stoi(row[mna.column("region_id")]));
    EXPECT_NEAR(std::stod(row[mna.column("mna_auto_um2")]), sum / n, 1e-9);
  }
}

TEST(Detect, RejectsAreaWeights) {
  Pipeline p("detect_reject");
  const auto w = na::cmd_train(p.at("model"), p.cohort, na::TrainMode::area).weights_path;
  EXPECT_THROW(na::cmd_detect(p.at("results"), p.cohort, w, false), na::DataError);
}

TEST(Detect, RecordsTauAndRespectsSeparation) {
  Pipeline p("detect");
  const auto w = na::cmd_train(p.at("model"), p.cohort, na::TrainMode::combined).weights_path;
  na::DetectSummary s;
  try {
    s = na::cmd_detect(p.at("results"), p.cohort, w, true);
  } catch (const na::DataError& e) {
    GTEST_SKIP() << "untrained model produced no detections: " << e.what();
  }
  const auto manifest = na::read_manifest(p.root.string() + "/results/manifest_detect.txt");
  EXPECT_EQ(manifest.at("tau"), na::format_fixed(s.tau, 2));
  EXPECT_TRUE(fs::exists(p.root / "results/maps/region_003.nnm"));

  const auto t = na::read_csv(s.detections_path);
  const double d_min = p.opts.config.real("detect.d_min_px");
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    for (std::size_t j = i + 1; j < t.rows.size(); ++j) {
      if (t.rows[i][0] != t.rows[j][0]) continue;
      const double dx = std::stod(t.rows[i][1]) - std::stod(t.rows[j][1]);
      const double dy = std::stod(t.rows[i][2]) - std::stod(t.rows[j][2]);
      EXPECT_GE(std::hypot(dx, dy), d_min);
    }

  const auto again = na::cmd_detect(p.at("results2"), p.cohort, w, false);
  EXPECT_EQ(slurp(s.detections_path), slurp(again.detections_path));
  EXPECT_EQ(slurp(s.mna_path), slurp(again.mna_path));
}

TEST(Evaluate, PerfectAgreement) {
  const auto root = scratch("eval_perfect");
  fs::create_directories(root);
  na::CsvWriter w({"region_id", "nucleus_id", "x_px", "y_px", "area_manual_um2", "area_auto_um2"});
  const double areas[] = {20, 35, 50, 41, 77, 90};
  for (int i = 0; i < 6; ++i)
    w.row({std::to_string(1 + i % 3), std::to_string(i), "0", "0", na::format_double(areas[i]),
           na::format_double(areas[i])});
  w.save((root / "m.csv").string());
  auto o = tiny(root / "out");
  const auto s = na::cmd_evaluate(o, {(root / "m.csv").string()});
  ASSERT_EQ(s.experiments.size(), 2u);
  EXPECT_EQ(s.experiments[0].name, "m_nuclei");
  EXPECT_EQ(s.experiments[1].name, "m_mna");
  for (const auto& e : s.experiments) {
    EXPECT_EQ(e.stats.bias, 0.0);
    EXPECT_EQ(e.stats.half_width, 0.0);
    EXPECT_NEAR(e.stats.r2, 1.0, 1e-12);
  }
  EXPECT_EQ(s.plots.size(), s.experiments.size() * 2);
  for (const auto& plot : s.plots) EXPECT_TRUE(fs::exists(plot));
  fs::remove_all(root);
}

TEST(Evaluate, ReferenceRowsWithoutExperiments) {
  const auto root = scratch("eval_empty");
  auto o = tiny(root);
  const auto s = na::cmd_evaluate(o, {});
  EXPECT_TRUE(s.plots.empty());
  const auto rows = na::parse_agreement_csv(na::read_csv(s.report_path));
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) EXPECT_TRUE(r.reference);
  fs::remove_all(root);
}

TEST(Evaluate, MnaFileGivesOneExperiment) {
  const auto root = scratch("eval_mna");
  fs::create_directories(root);
  na::CsvWriter w({"region_id", "n_manual", "n_auto", "mna_manual_um2", "mna_auto_um2"});
  w.row({"1", "5", "5", "50", "52"});
  w.row({"2", "5", "5", "60", "58"});
  w.row({"3", "5", "5", "70", "73"});
  w.save((root / "mna_combined.csv").string());
  auto o = tiny(root / "out");
  const auto s = na::cmd_evaluate(o, {(root / "mna_combined.csv").string()});
  ASSERT_EQ(s.experiments.size(), 1u);
  EXPECT_EQ(s.experiments[0].name, "mna_combined");
  EXPECT_NEAR(s.experiments[0].stats.bias, 1.0, 1e-12);
  EXPECT_EQ(s.plots.size(), 2u);
  fs::remove_all(root);
}

TEST(Evaluate, UnpairedRowsAreListed) {
  const auto root = scratch("eval_unpaired");
  fs::create_directories(root);
  na::write_text_file((root / "m.csv").string(),
                      "region_id,nucleus_id,x_px,y_px,area_manual_um2,area_auto_um2\n"
                      "1,1,0,0,30,31\n"
                      "1,2,0,0,40,\n"
                      "2,7,0,0,,50\n"
                      "2,8,0,0,45,44\n");
  auto o = tiny(root / "out");
  try {
    na::cmd_evaluate(o, {(root / "m.csv").string()});
    FAIL() << "expected DataError";
  } catch (const na::DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("1:2"), std::string::npos);
    EXPECT_NE(msg.find("2:7"), std::string::npos);
    EXPECT_EQ(msg.find("2:8"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(FcnConvert, DenseFormMatchesPatchModel) {
  const auto root = scratch("fcn");
  fs::create_directories(root);
  na::ArchitectureConfig arch;
  const auto d = na::build_paper_architecture(arch);
  na::save_weights(na::init_params<float>(d, 5), (root / "w.nnw").string());
  auto o = tiny(root / "out");
  const auto s = na::cmd_fcn_convert(o, (root / "w.nnw").string());
  EXPECT_LE(s.max_abs_difference, 1e-5);
  const auto loaded = na::load_model<float>(s.output_path);
  EXPECT_EQ(loaded.description.config.num_classes, 20u);
  EXPECT_EQ(na::read_tensor_container(s.output_path)[d.params.size() - 2].tensor.ndim(), 4u);
  fs::remove_all(root);
}

TEST(Manifest, HashIsFnv1a) {
  // Published FNV-1a 64 test vectors.
  EXPECT_EQ(na::fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(na::fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(na::fnv1a64("foobar"), 0x85944171f73967e8ULL);
}
