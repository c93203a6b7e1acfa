#pragma once

// The experiment pipeline behind the command-line tool. Each command reads
// its inputs from disk, writes its outputs plus a manifest_<command>.txt
// (resolved configuration, seed, input and output hashes) into the output
// directory, and returns a small summary for callers and tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nuclearea/agreement.hpp"
#include "nuclearea/augment.hpp"
#include "nuclearea/binning.hpp"
#include "nuclearea/config.hpp"
#include "nuclearea/csv.hpp"
#include "nuclearea/detection.hpp"
#include "nuclearea/error.hpp"
#include "nuclearea/image.hpp"
#include "nuclearea/network.hpp"
#include "nuclearea/synthetic.hpp"
#include "nuclearea/trainer.hpp"
#include "nuclearea/weights_io.hpp"

namespace nuclearea {

namespace fs = std::filesystem;

// -- files and manifests ------------------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

inline std::string file_hash(const std::string& path) { return hex64(fnv1a64(detail::read_file(path))); }

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

inline void ensure_directory(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir);
}

/// Key=value record of one command run. Timings are deliberately absent so
/// that reruns produce identical manifests.
class Manifest {
 public:
  explicit Manifest(std::string command) { add("command", std::move(command)); }

  void add(const std::string& key, const std::string& value) { lines_.emplace_back(key, value); }

  void add_config(const RunConfig& cfg) {
    add("profile", profile_name(cfg.profile()));
    std::string overrides;
    for (const auto& [k, v] : cfg.values()) {
      add("config." + k, v);
      if (cfg.is_overridden(k)) overrides += (overrides.empty() ? "" : " ") + k;
    }
    add("overrides", overrides);
  }

  void add_input(const std::string& path) { add("input." + fs::path(path).filename().string(), file_hash(path)); }
  void add_output(const std::string& path) { add("output." + fs::path(path).filename().string(), file_hash(path)); }

  std::string text() const {
    std::string s;
    for (const auto& [k, v] : lines_) s += k + "=" + v + "\n";
    return s;
  }

  void save(const std::string& path) const { write_text_file(path, text()); }

 private:
  std::vector<std::pair<std::string, std::string>> lines_;
};

inline std::map<std::string, std::string> read_manifest(const std::string& path) {
  std::map<std::string, std::string> out;
  std::istringstream in(detail::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

// -- options ------------------------------------------------------------------------

struct CommonOptions {
  RunConfig config;
  std::string out = ".";
  std::size_t threads = 1;
  bool deterministic = false;
  bool force = false;
  std::ostream* log = &std::cerr;

  std::size_t worker_threads() const { return deterministic ? 1 : std::max<std::size_t>(1, threads); }
  std::string path(const std::string& name) const { return (fs::path(out) / name).string(); }
};

inline void add_run_info(Manifest& m, const CommonOptions& o) {
  m.add("threads", std::to_string(o.worker_threads()));
  m.add("deterministic", o.deterministic ? "1" : "0");
  m.add_config(o.config);
}

namespace detail {

inline void say(const CommonOptions& o, const std::string& line) {
  if (o.log) *o.log << line << std::endl;
}

inline std::string region_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "region_%03d", id);
  return buf;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

// -- cohort on disk -------------------------------------------------------------------

struct CohortEntry {
  int region_id = 0;
  Subset subset = Subset::A1;
  std::uint64_t seed = 0;
  std::string image;  // relative to the cohort directory
  std::string truth;
};

struct LoadedRegion {
  CohortEntry entry;
  Image image;
  GroundTruth truth;

  std::vector<const NucleusTruth*> sampled() const {
    std::vector<const NucleusTruth*> out;
    for (const auto& n : truth.nuclei)
      if (n.sampled) out.push_back(&n);
    return out;
  }

  std::vector<std::pair<double, double>> centroids() const {
    std::vector<std::pair<double, double>> out;
    for (const auto& n : truth.nuclei) out.emplace_back(n.x_px, n.y_px);
    return out;
  }
};

inline const char* kCohortIndex = "cohort_manifest.csv";

inline std::string truth_csv(const GroundTruth& t) {
  CsvWriter w({"region_id", "nucleus_id", "x_px", "y_px", "area_um2", "area_px", "semi_major_px", "semi_minor_px",
               "angle_rad", "sampled"});
  for (const auto& n : t.nuclei)
    w.row({std::to_string(t.region_id), std::to_string(n.id), format_double(n.x_px), format_double(n.y_px),
           format_double(n.area_um2), format_double(n.area_px), format_double(n.semi_major_px),
           format_double(n.semi_minor_px), format_double(n.angle_rad), n.sampled ? "1" : "0"});
  return w.text();
}

inline GroundTruth parse_truth_csv(const CsvTable& t, int region_id, std::size_t width, std::size_t height) {
  GroundTruth g{region_id, width, height, {}};
  const auto id = t.column("nucleus_id"), x = t.column("x_px"), y = t.column("y_px"), a = t.column("area_um2"),
             apx = t.column("area_px"), ma = t.column("semi_major_px"), mi = t.column("semi_minor_px"),
             ang = t.column("angle_rad"), s = t.column("sampled");
  for (const auto& r : t.rows) {
    NucleusTruth n;
    n.id = static_cast<int>(parse_int(r[id], "nucleus_id"));
    n.x_px = parse_double(r[x], "x_px");
    n.y_px = parse_double(r[y], "y_px");
    n.area_um2 = parse_double(r[a], "area_um2");
    n.area_px = parse_double(r[apx], "area_px");
    n.semi_major_px = parse_double(r[ma], "semi_major_px");
    n.semi_minor_px = parse_double(r[mi], "semi_minor_px");
    n.angle_rad = parse_double(r[ang], "angle_rad");
    n.sampled = r[s] == "1";
    g.nuclei.push_back(n);
  }
  return g;
}

inline std::vector<CohortEntry> load_cohort_index(const std::string& dir) {
  const auto path = (fs::path(dir) / kCohortIndex).string();
  if (!fs::exists(path)) throw DataError("no cohort at " + dir + " (missing " + kCohortIndex + "; run synth first)");
  const auto t = read_csv(path);
  const auto id = t.column("region_id"), sub = t.column("subset"), seed = t.column("seed"), img = t.column("image"),
             tr = t.column("truth");
  std::vector<CohortEntry> out;
  for (const auto& r : t.rows) {
    CohortEntry e;
    e.region_id = static_cast<int>(parse_int(r[id], "region_id"));
    e.subset = parse_subset(r[sub]);
    const auto res = std::from_chars(r[seed].data(), r[seed].data() + r[seed].size(), e.seed);
    if (res.ec != std::errc()) throw DataError("cohort seed is not an integer: " + r[seed]);
    e.image = r[img];
    e.truth = r[tr];
    out.push_back(e);
  }
  if (out.empty()) throw DataError("cohort at " + dir + " lists no regions");
  return out;
}

inline LoadedRegion load_region(const std::string& dir, const CohortEntry& e) {
  LoadedRegion r{e, read_ppm((fs::path(dir) / e.image).string()), {}};
  r.truth = parse_truth_csv(read_csv((fs::path(dir) / e.truth).string()), e.region_id, image_width(r.image),
                            image_height(r.image));
  return r;
}

inline std::vector<LoadedRegion> load_subset(const std::string& dir, Subset s) {
  std::vector<LoadedRegion> out;
  for (const auto& e : load_cohort_index(dir))
    if (e.subset == s) out.push_back(load_region(dir, e));
  if (out.empty()) throw DataError("cohort at " + dir + " has no " + subset_name(s) + " regions");
  return out;
}

// -- synth ----------------------------------------------------------------------------

struct SynthSummary {
  std::size_t regions = 0;
  std::size_t a1 = 0, a2 = 0, b = 0;
  std::string manifest_hash;
};

/// Generates the cohort: regions/<region>.ppm and <region>_truth.csv, the
/// cohort index, and annotations.csv holding the sampled nuclei.
inline SynthSummary cmd_synth(const CommonOptions& o) {
  const auto spec = o.config.cohort();
  if (fs::exists(o.out) && !fs::is_directory(o.out)) throw ConfigError(o.out + " exists and is not a directory");
  if (fs::exists(o.out) && !fs::is_empty(o.out) && !o.force)
    throw ConfigError("output directory " + o.out + " is not empty (use --force to overwrite)");
  ensure_directory(o.path("regions"));

  const auto cohort = build_cohort(spec);
  CsvWriter index({"region_id", "subset", "seed", "image", "truth"});
  CsvWriter annotations({"region_id", "nucleus_id", "x_px", "y_px", "area_um2"});
  Manifest m("synth");
  add_run_info(m, o);
  SynthSummary summary;
  for (const auto& r : cohort) {
    const auto region = generate_cohort_region(spec, r);
    const auto stem = detail::region_stem(r.region_id);
    const auto image_rel = "regions/" + stem + ".ppm", truth_rel = "regions/" + stem + "_truth.csv";
    write_ppm(o.path(image_rel), region.image);
    write_text_file(o.path(truth_rel), truth_csv(region.truth));
    index.row({std::to_string(r.region_id), subset_name(r.subset), std::to_string(r.seed), image_rel, truth_rel});
    for (const auto& n : region.truth.nuclei)
      if (n.sampled)
        annotations.row({std::to_string(r.region_id), std::to_string(n.id), format_double(n.x_px),
                         format_double(n.y_px), format_double(n.area_um2)});
    m.add("output." + stem + ".ppm", file_hash(o.path(image_rel)));
    m.add("output." + stem + "_truth.csv", file_hash(o.path(truth_rel)));
    ++summary.regions;
    (r.subset == Subset::A1 ? summary.a1 : r.subset == Subset::A2 ? summary.a2 : summary.b)++;
    detail::say(o, "synth: " + stem + " (" + subset_name(r.subset) + ", " +
                       std::to_string(region.truth.nuclei.size()) + " nuclei)");
  }
  index.save(o.path(kCohortIndex));
  annotations.save(o.path("annotations.csv"));
  m.add_output(o.path(kCohortIndex));
  m.add_output(o.path("annotations.csv"));
  m.save(o.path("manifest_synth.txt"));
  summary.manifest_hash = file_hash(o.path("manifest_synth.txt"));
  return summary;
}

// -- train ----------------------------------------------------------------------------

enum class TrainMode { area, combined };

inline std::string mode_name(TrainMode m) { return m == TrainMode::area ? "area" : "combined"; }

inline TrainMode parse_mode(const std::string& s) {
  if (s == "area") return TrainMode::area;
  if (s == "combined") return TrainMode::combined;
  throw ConfigError("unknown training mode '" + s + "' (expected area or combined)");
}

struct TrainSummary {
  std::string weights_path;
  std::string history_path;
  std::size_t classes = 0;
  std::size_t iterations = 0;
  std::size_t best_iteration = 0;
  double best_val_loss = 0.0;
  std::size_t evaluations = 0;
  std::size_t pool_size = 0;
  std::size_t validation_size = 0;
};

/// Area mode: 20 classes from A1 sampled nuclei, validated on A2 sampled
/// nuclei. Combined mode adds background samples from both subsets and a
/// 21st class.
inline TrainSummary cmd_train(const CommonOptions& o, const std::string& cohort_dir, TrainMode mode) {
  const bool combined = mode == TrainMode::combined;
  const auto& cfg = o.config;
  const auto binning = cfg.binning();
  const auto aug = cfg.augment();
  auto tcfg = cfg.train(combined);
  tcfg.threads = o.worker_threads();
  const std::uint64_t seed = cfg.u64("seed");
  const std::size_t bg_per_region = cfg.count("background.per_region");
  const double exclusion = cfg.real("background.exclusion_radius_px");

  const auto train_regions = load_subset(cohort_dir, Subset::A1);
  const auto val_regions = load_subset(cohort_dir, Subset::A2);
  ensure_directory(o.out);

  std::vector<Image> images;
  std::vector<PoolSource> nuclei, backgrounds;
  for (const auto& r : train_regions) {
    const std::size_t idx = images.size();
    images.push_back(r.image);
    for (const auto* n : r.sampled()) nuclei.push_back({idx, n->x_px, n->y_px, n->area_um2, r.entry.region_id, n->id});
    if (combined) {
      Rng rng(derive_seed(seed, {0xB6, static_cast<std::uint64_t>(r.entry.region_id)}));
      const auto centers = sample_background_centers(image_width(r.image), image_height(r.image), r.centroids(),
                                                     bg_per_region, exclusion, rng);
      for (std::size_t k = 0; k < centers.size(); ++k)
        backgrounds.push_back(
            {idx, centers[k].first, centers[k].second, 0.0, r.entry.region_id, static_cast<int>(k)});
    }
  }
  if (nuclei.empty()) throw DataError("A1 regions contain no annotated nuclei");
  AugmentedPool pool(&images, nuclei, backgrounds, aug, binning, derive_seed(seed, {0xF00, combined ? 1u : 0u}),
                     cfg.flag("augment.balanced"));

  std::vector<PatchSample> validation;
  for (const auto& r : val_regions) {
    const auto sampled = r.sampled();
    for (const auto* n : sampled)
      validation.push_back({extract_patch(r.image, n->x_px, n->y_px, aug.patch_px), quantize(n->area_um2, binning),
                            n->area_um2});
    if (combined) {
      Rng rng(derive_seed(seed, {0xB7, static_cast<std::uint64_t>(r.entry.region_id)}));
      for (auto& s : sample_background(r.image, r.centroids(), sampled.size(), exclusion, rng, aug.patch_px, binning))
        validation.push_back(std::move(s));
    }
  }
  if (validation.empty()) throw DataError("A2 regions contain no annotated nuclei");

  ArchitectureConfig arch;
  arch.num_classes = binning.n_bins + (combined ? 1 : 0);
  arch.patch_px = aug.patch_px;
  const auto d = build_paper_architecture(arch);
  detail::say(o, "train " + mode_name(mode) + ": pool " + std::to_string(pool.size()) + ", validation " +
                     std::to_string(validation.size()) + ", " + std::to_string(tcfg.max_iterations) + " iterations");

  auto result = train_loop(d, init_params<float>(d, derive_seed(seed, {0x1D, combined ? 1u : 0u})), pool, validation,
                           tcfg, [&](const HistoryRow& h) {
                             detail::say(o, "  iteration " + std::to_string(h.iteration) + " lr " +
                                                format_fixed(h.lr, 5) + " train " + format_fixed(h.train_loss, 4) +
                                                " val " + format_fixed(h.val_loss, 4));
                           });

  TrainSummary s;
  s.weights_path = o.path("weights_" + mode_name(mode) + ".nnw");
  s.history_path = o.path("history_" + mode_name(mode) + ".csv");
  save_weights(result.params, s.weights_path);
  CsvWriter history({"iteration", "lr", "train_loss", "val_loss"});
  for (const auto& h : result.history)
    history.row({std::to_string(h.iteration), format_double(h.lr), format_double(h.train_loss),
                 format_double(h.val_loss)});
  history.save(s.history_path);

  s.classes = arch.num_classes;
  s.iterations = result.iterations;
  s.best_iteration = result.best_iteration;
  s.best_val_loss = result.best_val_loss;
  s.evaluations = result.history.size();
  s.pool_size = pool.size();
  s.validation_size = validation.size();

  Manifest m("train");
  m.add("mode", mode_name(mode));
  add_run_info(m, o);
  m.add_input((fs::path(cohort_dir) / kCohortIndex).string());
  m.add("iterations", std::to_string(s.iterations));
  m.add("best_iteration", std::to_string(s.best_iteration));
  m.add("best_val_loss", format_double(s.best_val_loss));
  m.add("stopped_early", result.stopped_early ? "1" : "0");
  m.add_output(s.weights_path);
  m.add_output(s.history_path);
  m.save(o.path("manifest_train_" + mode_name(mode) + ".txt"));
  return s;
}

// -- measure --------------------------------------------------------------------------

inline LoadedModel<float> load_model_with_classes(const std::string& path, std::size_t classes,
                                                  const std::string& purpose) {
  auto model = load_model<float>(path);
  const auto k = model.description.config.num_classes;
  if (k != classes)
    throw DataError(purpose + " needs " + std::to_string(classes) + "-class weights, " + path + " has " +
                    std::to_string(k) + " classes");
  return model;
}

struct MeasureSummary {
  std::size_t nuclei = 0;
  std::string measurements_path;
  std::string mna_path;
};

/// Area at every annotated (sampled) nucleus of subset B with the 20-class
/// model; writes measurements_known_location.csv and mna_known_location.csv.
inline MeasureSummary cmd_measure(const CommonOptions& o, const std::string& cohort_dir,
                                  const std::string& weights_path) {
  const auto binning = o.config.binning();
  const auto model = load_model_with_classes(weights_path, binning.n_bins, "measure");
  const auto regions = load_subset(cohort_dir, Subset::B);
  ensure_directory(o.out);

  NetworkRunner<float> runner(model.description);
  const std::size_t patch = model.description.config.patch_px;
  CsvWriter rows({"region_id", "nucleus_id", "x_px", "y_px", "area_manual_um2", "area_auto_um2"});
  CsvWriter mna({"region_id", "n", "mna_manual_um2", "mna_auto_um2"});
  MeasureSummary s;
  for (const auto& r : regions) {
    std::vector<double> manual, automatic;
    for (const auto* n : r.sampled()) {
      const auto p = extract_patch(r.image, n->x_px, n->y_px, patch);
      const double area = reconstruct_area(runner.predict(model.params, p.values()), binning);
      manual.push_back(n->area_um2);
      automatic.push_back(area);
      rows.row({std::to_string(r.entry.region_id), std::to_string(n->id), format_double(n->x_px),
                format_double(n->y_px), format_double(n->area_um2), format_double(area)});
    }
    if (manual.empty()) throw DataError(detail::region_stem(r.entry.region_id) + " has no annotated nuclei");
    mna.row({std::to_string(r.entry.region_id), std::to_string(manual.size()),
             format_double(detail::mean_of(manual)), format_double(detail::mean_of(automatic))});
    s.nuclei += manual.size();
  }
  s.measurements_path = o.path("measurements_known_location.csv");
  s.mna_path = o.path("mna_known_location.csv");
  rows.save(s.measurements_path);
  mna.save(s.mna_path);

  Manifest m("measure");
  add_run_info(m, o);
  m.add_input((fs::path(cohort_dir) / kCohortIndex).string());
  m.add_input(weights_path);
  m.add_output(s.measurements_path);
  m.add_output(s.mna_path);
  m.save(o.path("manifest_measure.txt"));
  return s;
}

// -- detect ---------------------------------------------------------------------------

struct DetectSummary {
  double tau = 0.0;
  std::vector<SweepPoint> sweep;
  MatchStats matches;
  std::size_t detections = 0;
  std::string detections_path;
  std::string mna_path;
};

inline std::vector<std::pair<double, double>> detection_centers(const DetectionResult& r) {
  std::vector<std::pair<double, double>> out;
  for (const auto& n : r.nuclei) out.emplace_back(n.x_px, n.y_px);
  return out;
}

/// Chooses tau on A2 against the annotated MNA, then detects and measures on
/// B. With dump_maps the probability maps go to maps/<region>.nnm.
inline DetectSummary cmd_detect(const CommonOptions& o, const std::string& cohort_dir,
                                const std::string& weights_path, bool dump_maps) {
  const auto& cfg = o.config;
  const auto binning = cfg.binning();
  const auto stride = cfg.detect_stride();
  const double d_min = cfg.real("detect.d_min_px");
  const double tolerance = cfg.real("detect.match_tolerance_px");
  const auto model = load_model_with_classes(weights_path, binning.n_bins + 1, "detect");
  const auto index = load_cohort_index(cohort_dir);
  ensure_directory(o.out);
  if (dump_maps) ensure_directory(o.path("maps"));

  auto map_for = [&](const LoadedRegion& r) {
    detail::say(o, "detect: dense inference on " + detail::region_stem(r.entry.region_id));
    auto map = dense_inference_full(model.description, model.params, r.image, stride, o.worker_threads());
    // Work on the single-precision values a map dump stores, so a dumped map
    // reproduces every decision made here.
    for (auto& v : map.probs) v = static_cast<float>(v);
    if (dump_maps) save_probability_map(map, o.path("maps/" + detail::region_stem(r.entry.region_id) + ".nnm"));
    return map;
  };

  std::vector<ProbabilityMap> val_maps;
  std::vector<double> val_mna;
  for (const auto& e : index) {
    if (e.subset != Subset::A2) continue;
    const auto r = load_region(cohort_dir, e);
    std::vector<double> areas;
    for (const auto* n : r.sampled()) areas.push_back(n->area_um2);
    if (areas.empty()) throw DataError(detail::region_stem(e.region_id) + " has no annotated nuclei");
    val_maps.push_back(map_for(r));
    val_mna.push_back(detail::mean_of(areas));
  }
  std::vector<ValidationRegion> validation;
  for (std::size_t i = 0; i < val_maps.size(); ++i) validation.push_back({&val_maps[i], val_mna[i]});
  const auto search = optimize_operating_point(validation, default_tau_grid(), d_min, binning);

  DetectSummary s;
  s.tau = search.best.tau;
  s.sweep = search.sweep;
  CsvWriter sweep({"tau", "mean_abs_mna_error_um2", "detections"});
  for (const auto& p : search.sweep)
    sweep.row({format_fixed(p.tau, 2), format_double(p.error), std::to_string(p.detections)});

  CsvWriter dets({"region_id", "x_px", "y_px", "area_um2", "p_background"});
  CsvWriter mna({"region_id", "n_manual", "n_auto", "mna_manual_um2", "mna_auto_um2"});
  CsvWriter stats({"region_id", "n_truth", "n_detected", "tp", "fp", "fn", "precision", "recall", "f1"});
  auto stats_row = [&](const std::string& id, std::size_t truth, std::size_t detected, const MatchStats& m) {
    stats.row({id, std::to_string(truth), std::to_string(detected), std::to_string(m.true_positives),
               std::to_string(m.false_positives), std::to_string(m.false_negatives), format_double(m.precision()),
               format_double(m.recall()), format_double(m.f1())});
  };
  std::size_t truth_total = 0;
  for (const auto& e : index) {
    if (e.subset != Subset::B) continue;
    const auto r = load_region(cohort_dir, e);
    const auto map = map_for(r);
    const auto res = detect_and_measure(map, search.best, binning);
    std::vector<double> manual, automatic;
    for (const auto* n : r.sampled()) manual.push_back(n->area_um2);
    for (const auto& n : res.nuclei) {
      automatic.push_back(n.area_um2);
      dets.row({std::to_string(e.region_id), format_double(n.x_px), format_double(n.y_px), format_double(n.area_um2),
                format_double(n.p_background)});
    }
    if (manual.empty()) throw DataError(detail::region_stem(e.region_id) + " has no annotated nuclei");
    if (automatic.empty()) throw DataError(detail::region_stem(e.region_id) + ": no detections at tau " +
                                           format_fixed(s.tau, 2));
    mna.row({std::to_string(e.region_id), std::to_string(manual.size()), std::to_string(automatic.size()),
             format_double(detail::mean_of(manual)), format_double(detail::mean_of(automatic))});
    const auto m = match_detections(detection_centers(res), r.centroids(), tolerance);
    stats_row(std::to_string(e.region_id), r.truth.nuclei.size(), res.nuclei.size(), m);
    s.matches += m;
    s.detections += res.nuclei.size();
    truth_total += r.truth.nuclei.size();
  }
  stats_row("all", truth_total, s.detections, s.matches);

  s.detections_path = o.path("detections.csv");
  s.mna_path = o.path("mna_combined.csv");
  sweep.save(o.path("sweep.csv"));
  dets.save(s.detections_path);
  mna.save(s.mna_path);
  stats.save(o.path("detection_stats.csv"));

  Manifest m("detect");
  add_run_info(m, o);
  m.add_input((fs::path(cohort_dir) / kCohortIndex).string());
  m.add_input(weights_path);
  m.add("tau", format_fixed(s.tau, 2));
  m.add("d_min_px", format_double(d_min));
  for (const char* f : {"sweep.csv", "detections.csv", "mna_combined.csv", "detection_stats.csv"})
    m.add_output(o.path(f));
  m.save(o.path("manifest_detect.txt"));
  return s;
}

// -- evaluate -------------------------------------------------------------------------

struct EvaluateSummary {
  std::vector<AgreementRow> experiments;
  std::vector<std::string> plots;
  std::string report_path;
};

namespace detail {

struct PairedColumns {
  std::vector<std::string> ids;
  std::vector<double> manual, automatic;
  std::vector<int> region;
};

inline bool find_column(const CsvTable& t, const std::string& name, std::size_t& index) {
  for (std::size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i] == name) {
      index = i;
      return true;
    }
  return false;
}

/// Pairs manual and automatic values row by row. Rows missing either value,
/// and duplicate ids, are collected and reported together.
inline PairedColumns read_pairs(const CsvTable& t, const std::string& path, const std::string& manual_col,
                                const std::string& auto_col, bool per_nucleus) {
  const auto rc = t.column("region_id"), mc = t.column(manual_col), ac = t.column(auto_col);
  std::size_t nc = 0;
  if (per_nucleus) nc = t.column("nucleus_id");
  PairedColumns p;
  std::vector<std::string> bad;
  std::set<std::string> seen;
  for (const auto& row : t.rows) {
    const std::string id = per_nucleus ? row[rc] + ":" + row[nc] : row[rc];
    double m = 0.0, a = 0.0;
    bool ok = !row[mc].empty() && !row[ac].empty();
    if (ok) {
      try {
        m = parse_double(row[mc], manual_col);
        a = parse_double(row[ac], auto_col);
        ok = std::isfinite(m) && std::isfinite(a);
      } catch (const DataError&) {
        ok = false;
      }
    }
    if (!ok || !seen.insert(id).second) {
      bad.push_back(id);
      continue;
    }
    p.ids.push_back(id);
    p.region.push_back(static_cast<int>(parse_int(row[rc], "region_id")));
    p.manual.push_back(m);
    p.automatic.push_back(a);
  }
  if (!bad.empty()) {
    std::string list;
    for (std::size_t i = 0; i < bad.size(); ++i) list += (i ? ", " : "") + bad[i];
    throw DataError(path + ": unpaired rows for ids " + list);
  }
  return p;
}

}  // namespace detail

/// Agreement for each input. A per-nucleus file (area_manual_um2 and
/// area_auto_um2 columns) yields a <stem>_nuclei and a <stem>_mna
/// experiment; a per-region file (mna_manual_um2, mna_auto_um2) yields
/// <stem>. Every experiment gets a scatter and a Bland-Altman plot.
inline EvaluateSummary cmd_evaluate(const CommonOptions& o, const std::vector<std::string>& inputs) {
  ensure_directory(o.out);
  EvaluateSummary s;
  Manifest m("evaluate");
  add_run_info(m, o);
  auto run = [&](const std::string& name, const std::vector<double>& manual, const std::vector<double>& automatic) {
    const auto stats = agreement(manual, automatic);
    s.experiments.push_back({name, stats, false});
    const auto prefix = o.path(name);
    emit_plots(manual, automatic, stats, prefix, name);
    s.plots.push_back(prefix + "_scatter.svg");
    s.plots.push_back(prefix + "_bland_altman.svg");
  };
  for (const auto& path : inputs) {
    const auto t = read_csv(path);
    m.add_input(path);
    const auto stem = fs::path(path).stem().string();
    std::size_t dummy = 0;
    if (detail::find_column(t, "area_manual_um2", dummy)) {
      const auto p = detail::read_pairs(t, path, "area_manual_um2", "area_auto_um2", true);
      run(stem + "_nuclei", p.manual, p.automatic);
      std::map<int, std::pair<std::vector<double>, std::vector<double>>> by_region;
      for (std::size_t i = 0; i < p.ids.size(); ++i) {
        by_region[p.region[i]].first.push_back(p.manual[i]);
        by_region[p.region[i]].second.push_back(p.automatic[i]);
      }
      std::vector<double> mm, ma;
      for (const auto& [id, v] : by_region) {
        mm.push_back(detail::mean_of(v.first));
        ma.push_back(detail::mean_of(v.second));
      }
      run(stem + "_mna", mm, ma);
    } else if (detail::find_column(t, "mna_manual_um2", dummy)) {
      const auto p = detail::read_pairs(t, path, "mna_manual_um2", "mna_auto_um2", false);
      run(stem, p.manual, p.automatic);
    } else {
      throw DataError(path + ": expected area_manual_um2/area_auto_um2 or mna_manual_um2/mna_auto_um2 columns");
    }
  }
  s.report_path = o.path("agreement.csv");
  emit_agreement_report(s.experiments, s.report_path);
  m.add_output(s.report_path);
  m.save(o.path("manifest_evaluate.txt"));
  return s;
}

// -- fcn-convert ----------------------------------------------------------------------

struct ConvertSummary {
  std::string output_path;
  double max_abs_difference = 0.0;  // dense vs patch model on one patch-sized input
};

/// Writes the fully convolutional form of a patch model and checks that on
/// a patch-sized input both forms produce the same class probabilities.
inline ConvertSummary cmd_fcn_convert(const CommonOptions& o, const std::string& weights_path) {
  const auto model = load_model<float>(weights_path);
  const auto dense = convert_to_fully_convolutional(model.description, model.params);
  ensure_directory(o.out);
  ConvertSummary s;
  s.output_path = o.path(fs::path(weights_path).stem().string() + "_fcn.nnw");
  save_dense_network(dense, s.output_path);

  const auto& c = model.description.config;
  Rng rng(derive_seed(o.config.u64("seed"), {0xFC}));
  Tensor<float> probe({c.channels, c.patch_px, c.patch_px});
  for (auto& v : probe.values()) v = static_cast<float>(rng.uniform());
  const auto patch = forward(model.description, model.params, probe);
  const auto map = dense_forward_shared(dense, probe);
  for (std::size_t k = 0; k < c.num_classes; ++k)
    s.max_abs_difference = std::max(s.max_abs_difference, std::abs(patch[k] - static_cast<double>(map[k])));
  if (!(s.max_abs_difference <= 1e-5))
    throw NumericError("fully convolutional form disagrees with the patch model by " +
                       format_double(s.max_abs_difference));

  Manifest m("fcn-convert");
  add_run_info(m, o);
  m.add_input(weights_path);
  m.add("max_abs_difference", format_double(s.max_abs_difference));
  m.add_output(s.output_path);
  m.save(o.path("manifest_fcn_convert.txt"));
  return s;
}

}  // namespace nuclearea
