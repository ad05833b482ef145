// noiselab: train, sweep, predict, verify and report from the command line.
//
// Exit codes: 0 success, 1 numerical failure / unexpected divergence / failed
// verification, 2 configuration or usage error.

#include "noiselab/config.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/experiment.hpp"
#include "noiselab/io.hpp"
#include "noiselab/verify.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace noiselab;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

void add_common(CLI::App* app, Common& c, bool with_config = true) {
  if (with_config) app->add_option("--config", c.config, "experiment config (YAML)")->required();
  app->add_option("--out", c.out, "output root (default: $NOISE_LAB_OUT or ./noise_lab_out)");
  app->add_option("--seed", c.seed, "override optim.seed for every run");
  app->add_option("--threads", c.threads, "worker threads for independent runs")->check(CLI::PositiveNumber);
}

std::optional<std::string> out_opt(const Common& c) {
  if (c.out.empty()) return std::nullopt;
  return c.out;
}

int finish(const ExperimentOutcome& o) {
  std::cout << report_table(o.report);
  std::cout << "wrote " << o.dir.string() << "\n";
  const auto bad = o.report.unexpected_divergences();
  if (!bad.empty()) {
    std::cerr << "error: unexpected divergence in";
    for (const auto& id : bad) std::cerr << " " << id;
    std::cerr << "\n";
    return 1;
  }
  return 0;
}

int cmd_run(const Common& c) {
  const ExperimentConfig cfg = load_experiment(c.config);
  ExecuteOptions opts;
  opts.out_root = resolve_output_root(out_opt(c), cfg);
  opts.seed = c.seed;
  opts.threads = c.threads;
  return finish(execute_experiment(cfg, opts));
}

int cmd_sweep(const Common& c, const std::string& axis, const std::vector<double>& values) {
  ExperimentConfig cfg = load_experiment(c.config);
  if (!axis.empty()) {
    if (values.empty()) throw ConfigError("--axis needs --values");
    SweepEntry s;
    s.id = "sweep";
    for (char ch : axis) s.id += ch == '.' ? '_' : ch;
    s.axis = axis;
    s.values = values;
    cfg.runs.clear();
    cfg.predictions.clear();
    cfg.sweeps = {s};
    RunSpec base = cfg.resolve_sweep_base(s);
    for (double v : values) with_axis_value(base, axis, v);
  } else if (cfg.sweeps.empty()) {
    throw ConfigError("config '" + c.config + "' declares no sweeps; pass --axis and --values");
  }
  ExecuteOptions opts;
  opts.out_root = resolve_output_root(out_opt(c), cfg);
  opts.seed = c.seed;
  opts.threads = c.threads;
  opts.runs = false;
  opts.predictions = false;
  return finish(execute_experiment(cfg, opts));
}

int cmd_predict(const Common& c) {
  const ExperimentConfig cfg = load_experiment(c.config);
  if (cfg.predictions.empty()) throw ConfigError("config '" + c.config + "' declares no predictions");
  ExecuteOptions opts;
  opts.out_root = resolve_output_root(out_opt(c), cfg);
  opts.runs = false;
  opts.sweeps = false;
  const ExperimentOutcome o = execute_experiment(cfg, opts);
  std::cout << report_table(o.report);
  std::cout << "wrote " << o.dir.string() << "\n";
  return 0;
}

int cmd_verify(const std::string& suite, const Common& c) {
  if (!is_verify_suite(suite)) {
    std::cerr << "error: unknown suite '" << suite << "'; choose one of: all";
    for (const auto& s : verify_suites()) std::cerr << ", " << s;
    std::cerr << "\n";
    return 2;
  }
  const auto checks = run_verify_suite(suite, c.seed.value_or(0));
  bool ok = true;
  for (const auto& v : checks) {
    ok = ok && v.pass;
    std::cout << (v.pass ? "PASS " : "FAIL ") << std::left << std::setw(26) << v.suite << std::setw(48) << v.name
              << " measured=" << std::setprecision(4) << v.measured << " tol=" << v.tolerance;
    if (!v.notes.empty()) std::cout << "  (" << v.notes << ")";
    std::cout << "\n";
  }
  std::cout << (ok ? "all checks passed" : "some checks failed") << "\n";
  return ok ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& dirs, const Common& c) {
  if (dirs.empty()) throw ConfigError("report needs at least one run or experiment directory");
  std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
  const ExperimentReport rep = report_from_dirs(paths);
  const std::filesystem::path dest = c.out.empty() ? paths.front() : std::filesystem::path(c.out);
  std::filesystem::create_directories(dest);
  write_file_atomic(dest / "report.json", report_to_json(rep).dump(2) + "\n");
  write_file_atomic(dest / "report.txt", report_table(rep));
  std::cout << report_table(rep);
  std::cout << "wrote " << (dest / "report.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"noiselab: SGD noise, exponential symmetries and their equilibria"};
  app.require_subcommand(1);

  Common run_c, sweep_c, pred_c, verify_c, report_c;
  auto* run = app.add_subcommand("run", "run every run, sweep and prediction of an experiment");
  add_common(run, run_c);

  auto* sweep = app.add_subcommand("sweep", "run the sweeps of an experiment, or one ad-hoc sweep");
  add_common(sweep, sweep_c);
  std::string axis;
  std::vector<double> values;
  sweep->add_option("--axis", axis, "field to sweep, e.g. optim.lr");
  sweep->add_option("--values", values, "values for --axis")->delimiter(',');

  auto* predict = app.add_subcommand("predict", "evaluate the closed-form predictions of an experiment");
  add_common(predict, pred_c);

  auto* verify = app.add_subcommand("verify", "run an invariant suite");
  std::string suite;
  verify->add_option("suite", suite, "suite name or 'all'")->required();
  add_common(verify, verify_c, false);

  auto* report = app.add_subcommand("report", "summarize experiment or run directories");
  std::vector<std::string> dirs;
  report->add_option("dirs", dirs, "experiment, run or prediction directories");
  add_common(report, report_c, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*run) return cmd_run(run_c);
    if (*sweep) return cmd_sweep(sweep_c, axis, values);
    if (*predict) return cmd_predict(pred_c);
    if (*verify) return cmd_verify(suite, verify_c);
    if (*report) return cmd_report(dirs, report_c);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
