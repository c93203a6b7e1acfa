#pragma once

// Run configuration: a flat key=value table seeded from a profile, then
// overridden by a config file and by command-line settings. Every key is
// known up front so typos fail loudly.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nuclearea/augment.hpp"
#include "nuclearea/binning.hpp"
#include "nuclearea/csv.hpp"
#include "nuclearea/detection.hpp"
#include "nuclearea/error.hpp"
#include "nuclearea/synthetic.hpp"
#include "nuclearea/trainer.hpp"

namespace nuclearea {

enum class Profile { paper, desk };

inline Profile parse_profile(const std::string& s) {
  if (s == "paper") return Profile::paper;
  if (s == "desk") return Profile::desk;
  throw ConfigError("unknown profile '" + s + "' (expected paper or desk)");
}

inline std::string profile_name(Profile p) { return p == Profile::paper ? "paper" : "desk"; }

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

class RunConfig {
 public:
  explicit RunConfig(Profile profile = Profile::desk) : profile_(profile) {
    const bool paper = profile == Profile::paper;
    values_ = {
        {"seed", "20170101"},
        {"binning.a_min_um2", "16.6"},
        {"binning.a_max_um2", "151.8"},
        {"binning.n_bins", "20"},
        {"synth.image_px", paper ? "4000" : "512"},
        {"synth.nucleus_count", paper ? "4000" : "60"},
        {"synth.sampled_per_region", "100"},
        {"synth.region_factor", paper ? "1" : "0.142857142857142857"},
        {"synth.area_median_um2", "55"},
        {"synth.area_sigma_log", "0.45"},
        {"synth.min_gap_px", "4"},
        {"augment.replicates", paper ? "1000" : "200"},
        {"augment.translation_px", "6"},
        {"augment.scale_min", "0.75"},
        {"augment.scale_max", "1.3"},
        {"augment.balanced", "1"},
        {"background.per_region", paper ? "40000" : "4800"},
        {"background.exclusion_radius_px", "10"},
        {"train.batch_size", paper ? "256" : "64"},
        {"train.base_lr", "0.01"},
        {"train.momentum", "0.9"},
        {"train.lr_step", "2000"},
        {"train.lr_factor", "0.9"},
        {"train.weight_decay", "0.001"},
        {"train.iterations_area", paper ? "25000" : "2000"},
        {"train.iterations_combined", paper ? "40000" : "3000"},
        {"train.eval_interval", paper ? "500" : "100"},
        {"train.patience_evals", "10"},
        {"detect.stride", "4"},
        {"detect.d_min_px", "9"},
        {"detect.match_tolerance_px", "8"},
    };
  }

  Profile profile() const { return profile_; }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) throw ConfigError("unknown configuration key '" + key + "'");
    values_[key] = trim(value);
    overridden_.insert(key);
  }

  /// Applies "key=value" lines; blank lines and '#' comments are skipped.
  void apply_text(const std::string& text, const std::string& origin) {
    std::size_t lineno = 0;
    std::string line;
    std::istringstream in(text);
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    apply_text(ss.str(), path);
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    try {
      return parse_double(str(key), key);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }

  std::size_t count(const std::string& key) const {
    long long v = 0;
    try {
      v = parse_int(str(key), key);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    if (v < 0) throw ConfigError(key + " must be non-negative");
    return static_cast<std::size_t>(v);
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(key + ": not an unsigned integer");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    throw ConfigError(key + ": expected 0/1 or true/false, got '" + s + "'");
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  bool is_overridden(const std::string& key) const { return overridden_.count(key) > 0; }

  // -- typed views --------------------------------------------------------------

  AreaBinning binning() const {
    AreaBinning b{real("binning.a_min_um2"), real("binning.a_max_um2"), count("binning.n_bins")};
    b.validate();
    return b;
  }

  CohortSpec cohort() const {
    CohortSpec c;
    c.region.image_px = count("synth.image_px");
    c.region.nucleus_count = count("synth.nucleus_count");
    c.region.area_median_um2 = real("synth.area_median_um2");
    c.region.area_sigma_log = real("synth.area_sigma_log");
    c.region.min_gap_px = real("synth.min_gap_px");
    const auto b = binning();
    c.region.area_min_um2 = b.a_min;
    c.region.area_max_um2 = b.a_max;
    c.region.validate();
    c.sampled_per_region = count("synth.sampled_per_region");
    c.region_factor = real("synth.region_factor");
    c.seed = u64("seed");
    return c;
  }

  AugmentConfig augment() const {
    AugmentConfig a;
    a.replicates = count("augment.replicates");
    a.translation_px = real("augment.translation_px");
    a.scale_min = real("augment.scale_min");
    a.scale_max = real("augment.scale_max");
    a.validate();
    return a;
  }

  TrainConfig train(bool combined) const {
    TrainConfig t;
    t.batch_size = count("train.batch_size");
    t.base_lr = real("train.base_lr");
    t.momentum = real("train.momentum");
    t.lr_step = count("train.lr_step");
    t.lr_factor = real("train.lr_factor");
    t.weight_decay = real("train.weight_decay");
    t.max_iterations = count(combined ? "train.iterations_combined" : "train.iterations_area");
    t.eval_interval = count("train.eval_interval");
    t.patience_evals = count("train.patience_evals");
    t.seed = derive_seed(u64("seed"), {combined ? 0xC0u : 0xA0u});
    t.validate();
    return t;
  }

  std::size_t detect_stride() const {
    const auto s = count("detect.stride");
    check_stride(s);
    return s;
  }

 private:
  Profile profile_;
  std::map<std::string, std::string> values_;
  std::set<std::string> overridden_;
};

}  // namespace nuclearea
