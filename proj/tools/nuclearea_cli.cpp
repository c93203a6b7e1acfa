// nuclearea: synthetic cohort generation, training, measurement, detection
// and agreement reporting from the command line.

#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "nuclearea/commands.hpp"

namespace {

struct Flags {
  std::string config;
  std::string profile = "desk";
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  bool deterministic = false;
  bool force = false;
  bool quiet = false;
  std::vector<std::string> settings;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key=value configuration file");
  cmd->add_option("--profile", f.profile, "parameter profile")->check(CLI::IsMember({"paper", "desk"}));
  cmd->add_option("--seed", f.seed, "global seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--deterministic", f.deterministic, "single-threaded, reproducible run");
  cmd->add_flag("--force", f.force, "overwrite a non-empty output directory");
  cmd->add_flag("--quiet", f.quiet, "no progress output");
  cmd->add_option("--set", f.settings, "override one key (key=value), repeatable");
}

nuclearea::CommonOptions resolve(const Flags& f) {
  nuclearea::CommonOptions o{nuclearea::RunConfig(nuclearea::parse_profile(f.profile))};
  if (!f.config.empty()) o.config.load_file(f.config);
  if (f.seed) o.config.set("seed", std::to_string(*f.seed));
  for (const auto& s : f.settings) o.config.apply_text(s, "--set");
  o.out = f.out;
  o.threads = f.threads;
  o.deterministic = f.deterministic;
  o.force = f.force;
  o.log = f.quiet ? nullptr : &std::cerr;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nuclear area measurement with a patch classifier"};
  app.require_subcommand(1);
  Flags f;
  std::string cohort, weights, mode = "area";
  std::vector<std::string> inputs;
  bool dump_maps = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
  add_common(synth, f);

  auto* train = app.add_subcommand("train", "train the area or combined model");
  add_common(train, f);
  train->add_option("--cohort", cohort, "cohort directory")->required();
  train->add_option("--mode", mode, "area or combined")->check(CLI::IsMember({"area", "combined"}));

  auto* measure = app.add_subcommand("measure", "measure areas at annotated nuclei of subset B");
  add_common(measure, f);
  measure->add_option("--cohort", cohort, "cohort directory")->required();
  measure->add_option("--weights", weights, "20-class weights")->required();

  auto* detect = app.add_subcommand("detect", "detect and measure nuclei in subset B");
  add_common(detect, f);
  detect->add_option("--cohort", cohort, "cohort directory")->required();
  detect->add_option("--weights", weights, "21-class weights")->required();
  detect->add_flag("--dump-maps", dump_maps, "write probability maps");

  auto* evaluate = app.add_subcommand("evaluate", "agreement statistics and plots");
  add_common(evaluate, f);
  evaluate->add_option("--input", inputs, "measurement CSV, repeatable");

  auto* convert = app.add_subcommand("fcn-convert", "write the fully convolutional form of a model");
  add_common(convert, f);
  convert->add_option("--weights", weights, "patch-model weights")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const auto o = resolve(f);
    if (synth->parsed()) {
      const auto s = nuclearea::cmd_synth(o);
      std::cout << "synth: " << s.regions << " regions (" << s.a1 << "/" << s.a2 << "/" << s.b << ") in " << o.out
                << "\n";
    } else if (train->parsed()) {
      const auto s = nuclearea::cmd_train(o, cohort, nuclearea::parse_mode(mode));
      std::cout << "train: " << s.classes << " classes, " << s.iterations << " iterations, best validation loss "
                << s.best_val_loss << " at " << s.best_iteration << " -> " << s.weights_path << "\n";
    } else if (measure->parsed()) {
      const auto s = nuclearea::cmd_measure(o, cohort, weights);
      std::cout << "measure: " << s.nuclei << " nuclei -> " << s.measurements_path << "\n";
    } else if (detect->parsed()) {
      const auto s = nuclearea::cmd_detect(o, cohort, weights, dump_maps);
      std::cout << "detect: tau " << s.tau << ", " << s.detections << " detections, F1 " << s.matches.f1()
                << " -> " << s.detections_path << "\n";
    } else if (evaluate->parsed()) {
      const auto s = nuclearea::cmd_evaluate(o, inputs);
      for (const auto& e : s.experiments)
        std::cout << e.name << ": n " << e.stats.n << ", b " << e.stats.bias << " +/- " << e.stats.half_width
                  << ", r2 " << e.stats.r2 << "\n";
      std::cout << "report -> " << s.report_path << "\n";
    } else if (convert->parsed()) {
      const auto s = nuclearea::cmd_fcn_convert(o, weights);
      std::cout << "fcn-convert: max difference " << s.max_abs_difference << " -> " << s.output_path << "\n";
    }
  } catch (const nuclearea::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
