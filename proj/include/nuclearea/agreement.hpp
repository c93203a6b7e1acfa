#pragma once

// Agreement between manual and automatic measurements: Bland-Altman bias
// and limits of agreement, coefficient of determination of a linear fit,
// the agreement CSV report and scatter / Bland-Altman SVG plots.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "nuclearea/csv.hpp"
#include "nuclearea/error.hpp"

namespace nuclearea {

struct AgreementStats {
  std::size_t n = 0;
  double bias = 0.0;        // mean(automatic - manual)
  double sd = 0.0;          // sample standard deviation of the differences
  double half_width = 0.0;  // 1.96 * sd
  double r2 = 0.0;
};

inline constexpr double kLimitsOfAgreementZ = 1.96;

inline void check_pairs(std::span<const double> manual, std::span<const double> automatic, std::size_t min_n) {
  if (manual.size() != automatic.size())
    throw DataError("unpaired measurements: " + std::to_string(manual.size()) + " manual vs " +
                    std::to_string(automatic.size()) + " automatic");
  if (manual.size() < min_n)
    throw DataError("agreement needs at least " + std::to_string(min_n) + " pairs, got " +
                    std::to_string(manual.size()));
}

/// Bias, sd and half-width; r2 is left at 0.
inline AgreementStats bland_altman(std::span<const double> manual, std::span<const double> automatic) {
  check_pairs(manual, automatic, 2);
  const std::size_t n = manual.size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += automatic[i] - manual[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = automatic[i] - manual[i] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return {n, mean, sd, kLimitsOfAgreementZ * sd, 0.0};
}

/// r^2 of the least-squares line automatic ~ manual.
inline double r_squared(std::span<const double> manual, std::span<const double> automatic) {
  check_pairs(manual, automatic, 3);
  const auto n = static_cast<double>(manual.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < manual.size(); ++i) {
    mx += manual[i];
    my += automatic[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < manual.size(); ++i) {
    sxx += (manual[i] - mx) * (manual[i] - mx);
    sxy += (manual[i] - mx) * (automatic[i] - my);
    syy += (automatic[i] - my) * (automatic[i] - my);
  }
  if (!(sxx > 0.0)) throw DataError("r_squared: manual values are all equal");
  if (!(syy > 0.0)) return 0.0;  // a constant response explains nothing
  const double slope = sxy / sxx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < manual.size(); ++i) {
    const double e = automatic[i] - (my + slope * (manual[i] - mx));
    ss_res += e * e;
  }
  return std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
}

inline AgreementStats agreement(std::span<const double> manual, std::span<const double> automatic) {
  AgreementStats s = bland_altman(manual, automatic);
  s.r2 = manual.size() >= 3 ? r_squared(manual, automatic) : 0.0;
  return s;
}

// -- report ------------------------------------------------------------------------

inline constexpr const char* kReferenceNote = "paper reference (not reproducible without clinical data)";
inline constexpr const char* kLimitsNote = "limits of agreement b +/- 1.96 sd";

struct AgreementRow {
  std::string name;
  AgreementStats stats;
  bool reference = false;
};

/// The published agreement figures, kept for comparison only.
inline std::vector<AgreementRow> reference_constants() {
  auto row = [](const char* name, double b, double hw, double r2) {
    return AgreementRow{name, {0, b, hw / kLimitsOfAgreementZ, hw, r2}, true};
  };
  return {row("reference_individual_nuclei", -2.19, 18.85, 0.87),
          row("reference_known_location_mna", -2.18, 3.32, 0.99),
          row("reference_combined_mna", -2.98, 9.26, 0.89),
          row("reference_segmentation_mna", -1.20, 13.50, 0.77)};
}

inline std::string agreement_csv(const std::vector<AgreementRow>& experiments) {
  CsvWriter w({"name", "n", "b", "sd", "half_width", "r2", "reference", "note"});
  auto emit = [&](const AgreementRow& r) {
    w.row({r.name, std::to_string(r.stats.n), format_double(r.stats.bias), format_double(r.stats.sd),
           format_double(r.stats.half_width), format_double(r.stats.r2), r.reference ? "1" : "0",
           r.reference ? kReferenceNote : kLimitsNote});
  };
  for (const auto& r : experiments) emit(r);
  for (const auto& r : reference_constants()) emit(r);
  return w.text();
}

inline void emit_agreement_report(const std::vector<AgreementRow>& experiments, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << agreement_csv(experiments);
  if (!out) throw DataError("write failed for " + path);
}

inline std::vector<AgreementRow> parse_agreement_csv(const CsvTable& t) {
  const auto name = t.column("name"), n = t.column("n"), b = t.column("b"), sd = t.column("sd"),
             hw = t.column("half_width"), r2 = t.column("r2"), ref = t.column("reference");
  std::vector<AgreementRow> out;
  for (const auto& row : t.rows)
    out.push_back({row[name],
                   {static_cast<std::size_t>(parse_int(row[n], "n")), parse_double(row[b], "b"),
                    parse_double(row[sd], "sd"), parse_double(row[hw], "half_width"), parse_double(row[r2], "r2")},
                   row[ref] == "1"});
  return out;
}

// -- plots ---------------------------------------------------------------------------

/// Linear data-to-pixel map for one plot panel. The mapping is written
/// into the SVG as data-* attributes so it can be inverted from the file.
struct PlotFrame {
  double x_min = 0.0, x_max = 1.0, y_min = 0.0, y_max = 1.0;
  double left = 70.0, top = 30.0, width = 400.0, height = 400.0;

  double px(double x) const { return left + (x - x_min) / (x_max - x_min) * width; }
  double py(double y) const { return top + height - (y - y_min) / (y_max - y_min) * height; }
};

namespace detail {

inline std::pair<double, double> padded_range(double lo, double hi) {
  if (!(hi > lo)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

inline std::string svg_num(double v) { return format_fixed(v, 3); }

inline std::string svg_open(const PlotFrame& f, const std::string& title, const std::string& xlabel,
                            const std::string& ylabel) {
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + svg_num(f.left + f.width + 30) +
       "\" height=\"" + svg_num(f.top + f.height + 60) + "\">\n";
  s += "<title>" + title + "</title>\n";
  s += "<g id=\"frame\" data-x-min=\"" + format_double(f.x_min) + "\" data-x-max=\"" + format_double(f.x_max) +
       "\" data-y-min=\"" + format_double(f.y_min) + "\" data-y-max=\"" + format_double(f.y_max) +
       "\" data-left=\"" + format_double(f.left) + "\" data-top=\"" + format_double(f.top) + "\" data-width=\"" +
       format_double(f.width) + "\" data-height=\"" + format_double(f.height) + "\">\n";
  s += "<rect x=\"" + svg_num(f.left) + "\" y=\"" + svg_num(f.top) + "\" width=\"" + svg_num(f.width) +
       "\" height=\"" + svg_num(f.height) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.x_min + (f.x_max - f.x_min) * k / 4.0, yv = f.y_min + (f.y_max - f.y_min) * k / 4.0;
    s += "<text x=\"" + svg_num(f.px(xv)) + "\" y=\"" + svg_num(f.top + f.height + 16) +
         "\" font-size=\"11\" text-anchor=\"middle\">" + format_fixed(xv, 1) + "</text>\n";
    s += "<text x=\"" + svg_num(f.left - 6) + "\" y=\"" + svg_num(f.py(yv) + 4) +
         "\" font-size=\"11\" text-anchor=\"end\">" + format_fixed(yv, 1) + "</text>\n";
  }
  s += "<text x=\"" + svg_num(f.left + f.width / 2) + "\" y=\"" + svg_num(f.top + f.height + 40) +
       "\" font-size=\"13\" text-anchor=\"middle\">" + xlabel + "</text>\n";
  s += "<text x=\"16\" y=\"" + svg_num(f.top + f.height / 2) + "\" font-size=\"13\" text-anchor=\"middle\" "
       "transform=\"rotate(-90 16 " + svg_num(f.top + f.height / 2) + ")\">" + ylabel + "</text>\n";
  s += "<text x=\"" + svg_num(f.left + f.width / 2) + "\" y=\"18\" font-size=\"14\" text-anchor=\"middle\">" +
       title + "</text>\n";
  return s;
}

inline std::string svg_line(const std::string& id, double x1, double y1, double x2, double y2, const char* color,
                            const char* dash = nullptr) {
  std::string s = "<line id=\"" + id + "\" x1=\"" + svg_num(x1) + "\" y1=\"" + svg_num(y1) + "\" x2=\"" +
                  svg_num(x2) + "\" y2=\"" + svg_num(y2) + "\" stroke=\"" + color + "\"";
  if (dash) s += std::string(" stroke-dasharray=\"") + dash + "\"";
  return s + "/>\n";
}

inline std::string svg_point(double x, double y) {
  return "<circle class=\"point\" cx=\"" + svg_num(x) + "\" cy=\"" + svg_num(y) +
         "\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.7\"/>\n";
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed for " + path);
}

}  // namespace detail

/// Scatter of automatic against manual with the identity line.
inline std::string scatter_svg(std::span<const double> manual, std::span<const double> automatic,
                               const std::string& title) {
  check_pairs(manual, automatic, 2);
  const auto [lo0, hi0] = std::minmax_element(manual.begin(), manual.end());
  const auto [lo1, hi1] = std::minmax_element(automatic.begin(), automatic.end());
  const auto [lo, hi] = detail::padded_range(std::min(*lo0, *lo1), std::max(*hi0, *hi1));
  const PlotFrame f{lo, hi, lo, hi};
  std::string s = detail::svg_open(f, title, "manual area (um^2)", "automatic area (um^2)");
  s += detail::svg_line("identity", f.px(lo), f.py(lo), f.px(hi), f.py(hi), "red");
  for (std::size_t i = 0; i < manual.size(); ++i) s += detail::svg_point(f.px(manual[i]), f.py(automatic[i]));
  return s + "</g>\n</svg>\n";
}

/// Difference against mean, with lines at b and b +/- half-width.
inline std::string bland_altman_svg(std::span<const double> manual, std::span<const double> automatic,
                                    const AgreementStats& stats, const std::string& title) {
  check_pairs(manual, automatic, 2);
  std::vector<double> mean(manual.size()), diff(manual.size());
  for (std::size_t i = 0; i < manual.size(); ++i) {
    mean[i] = 0.5 * (manual[i] + automatic[i]);
    diff[i] = automatic[i] - manual[i];
  }
  const auto [mlo, mhi] = std::minmax_element(mean.begin(), mean.end());
  const auto [dlo, dhi] = std::minmax_element(diff.begin(), diff.end());
  const auto [xlo, xhi] = detail::padded_range(*mlo, *mhi);
  const auto [ylo, yhi] = detail::padded_range(std::min(*dlo, stats.bias - stats.half_width),
                                               std::max(*dhi, stats.bias + stats.half_width));
  const PlotFrame f{xlo, xhi, ylo, yhi};
  std::string s = detail::svg_open(f, title, "mean of manual and automatic (um^2)", "automatic - manual (um^2)");
  auto hline = [&](const std::string& id, double y, const char* color, const char* dash) {
    s += detail::svg_line(id, f.px(xlo), f.py(y), f.px(xhi), f.py(y), color, dash);
  };
  hline("bias", stats.bias, "red", nullptr);
  hline("loa-upper", stats.bias + stats.half_width, "gray", "6 4");
  hline("loa-lower", stats.bias - stats.half_width, "gray", "6 4");
  for (std::size_t i = 0; i < mean.size(); ++i) s += detail::svg_point(f.px(mean[i]), f.py(diff[i]));
  return s + "</g>\n</svg>\n";
}

/// Writes <prefix>_scatter.svg and <prefix>_bland_altman.svg.
inline void emit_plots(std::span<const double> manual, std::span<const double> automatic,
                       const AgreementStats& stats, const std::string& prefix, const std::string& title) {
  detail::write_text(prefix + "_scatter.svg", scatter_svg(manual, automatic, title));
  detail::write_text(prefix + "_bland_altman.svg", bland_altman_svg(manual, automatic, stats, title));
}

}  // namespace nuclearea
