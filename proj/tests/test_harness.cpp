#include "noiselab/config.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/experiment.hpp"
#include "noiselab/io.hpp"
#include "noiselab/record_io.hpp"
#include "noiselab/symmetry.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace noiselab;
namespace fs = std::filesystem;

namespace {

const char* kSmallExperiment = R"(experiment: small
anchor: fig3
description: tiny two-layer run
defaults:
  model: {type: two_layer_linear, d_x: 3, d: 4, d_y: 2}
  init: {scheme: xavier}
  data:
    d_x: 3
    n: 64
    seed: 2
    input: {kind: isotropic, variance: 1.0}
    teacher: {kind: random, d_y: 2, scale: 1.0}
    noise: {variance: 0.1}
  optim:
    algorithm: sgd
    lr: 0.05
    batch_size: 4
    steps: 300
    seed: 1
    diagnostics: {cadence: 50, noise: true, lambda_star: true, balance: true, sharpness: true}
  symmetries: declared
runs:
  - id: sgd
  - id: gd
    optim: {algorithm: gd}
sweeps:
  - id: lr
    axis: optim.lr
    values: [0.01, 0.02]
predictions:
  - {kind: balanced_global_minimum, name: balanced, run: sgd}
  - {kind: sharpness_table, name: sharpness, d: 4, d_x: 3, d_y: 2}
checks:
  - {kind: final_loss_below, anchor: fig3, run: sgd, threshold: 100.0}
  - {kind: balance_ratio_above, anchor: fig3, run: gd, reference: sgd, threshold: 0.0}
)";

ExperimentConfig small_config() { return experiment_from_json(yaml_to_json(kSmallExperiment)); }

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  f << s;
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  auto pos = s.find(from);
  REQUIRE(pos != std::string::npos);
  return s.replace(pos, from.size(), to);
}

int cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(NOISELAB_CLI_PATH) + " " + args +
                          " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("yaml scalars become typed json") {
  Json j = yaml_to_json("a: 1\nb: 2.5\nc: true\nd: text\ne: [1, x]\nf: {g: null}\n");
  CHECK(j["a"].is_number_integer());
  CHECK(j["b"].get<double>() == 2.5);
  CHECK(j["c"].get<bool>());
  CHECK(j["d"] == "text");
  CHECK(j["e"][1] == "x");
  CHECK(j["f"]["g"].is_null());
  CHECK(yaml_to_json(json_to_yaml(j)) == j);
  CHECK_THROWS_AS(yaml_to_json("a: [1, 2"), ParseError);
}

TEST_CASE("run specs round-trip through json") {
  auto cfg = small_config();
  RunSpec spec = cfg.resolve_run(cfg.runs[1]);
  CHECK(spec.optim.algorithm == Algorithm::GD);
  CHECK(spec.symmetries.size() == 3);
  Json j = run_spec_to_json(spec);
  CHECK(run_spec_to_json(run_spec_from_json(j, "run")) == j);

  spec.optim.warmup = Warmup{0.001, 0.01, 10, Warmup::Shape::Linear};
  spec.data.noise.overrides = {{1, 0.5}};
  spec.init.layer_scales = {1.0, 2.0};
  j = run_spec_to_json(spec);
  RunSpec back = run_spec_from_json(j, "run");
  CHECK(back.optim.warmup->shape == Warmup::Shape::Linear);
  CHECK(back.init.layer_scales[1] == 2.0);
  CHECK(run_spec_to_json(back) == j);
}

TEST_CASE("bundled configs load and round-trip") {
  int count = 0;
  for (const auto& e : fs::directory_iterator(NOISELAB_CONFIG_DIR)) {
    if (e.path().extension() != ".yaml") continue;
    CAPTURE(e.path().string());
    ExperimentConfig cfg = load_experiment(e.path());
    CHECK_FALSE(cfg.id.empty());
    Json j = experiment_to_json(cfg);
    CHECK(experiment_to_json(experiment_from_json(j)) == j);
    for (const auto& r : cfg.runs) CHECK_NOTHROW(cfg.resolve_run(r));
    for (const auto& s : cfg.sweeps) CHECK_NOTHROW(sweep_specs(cfg.resolve_sweep_base(s), s.axis, s.values));
    ++count;
  }
  CHECK(count >= 9);
}

TEST_CASE("config errors name the offending field") {
  const std::string base = kSmallExperiment;
  CHECK_THROWS_WITH_AS(experiment_from_json(yaml_to_json(replace(base, "    n: 64\n", ""))),
                       doctest::Contains("missing field 'runs.sgd.data.n'"), ConfigError);
  try {
    auto cfg = experiment_from_json(yaml_to_json(replace(base, "lr: 0.05", "lr: 0.05\n    momentum: 0.9")));
    cfg.resolve_run(cfg.runs[0]);
    FAIL("expected an unknown-field error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("unknown field") != std::string::npos);
    CHECK(std::string(e.what()).find("momentum") != std::string::npos);
  }
  CHECK_THROWS_AS(experiment_from_json(yaml_to_json(replace(base, "values: [0.01, 0.02]", "values: []"))),
                  ConfigError);
  CHECK_THROWS_AS(experiment_from_json(yaml_to_json(replace(base, "axis: optim.lr", "axis: optim.momentum"))),
                  ConfigError);
  CHECK_THROWS_AS(small_config().resolve_run(RunEntry{"x", yaml_to_json("symmetries: [{type: rescaling, up: [U]}]")}),
                  ConfigError);
}

TEST_CASE("symmetry descriptors round-trip") {
  TwoLayerLinear model{3, 4, 2};
  Json list = Json::array();
  for (const auto& d : declared_symmetries(model)) list.push_back(symmetry_to_json(d));
  Matrix A = Matrix::Identity(8, 8);
  list.push_back(symmetry_to_json(SymmetryDescriptor(GenericDense{{"U"}, A})));
  auto back = symmetries_from_json(list, model, "symmetries");
  REQUIRE(back.size() == 4);
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(symmetry_to_json(back[i]) == list[i]);
  auto declared = symmetries_from_json(Json::parse(R"([{"type": "declared"}])"), model, "symmetries");
  CHECK(declared.size() == 3);
}

TEST_CASE("params and diagnostics round-trip through disk") {
  auto dir = testutil::scratch("save_run");
  auto cfg = small_config();
  RunSpec spec = cfg.resolve_run(cfg.runs[0]);
  RunRecord rec = run(spec);
  CHECK(params_from_json(params_to_json(rec.terminal)).flatten() == rec.terminal.flatten());

  save_run(dir / "sgd", rec, "small", false, std::nullopt);
  CHECK(fs::exists(dir / "sgd" / "manifest.json"));
  CHECK(fs::exists(dir / "sgd" / "diagnostics.csv"));
  LoadedRun back = load_run(dir / "sgd");
  CHECK(back.run_id() == "sgd");
  CHECK(back.terminal.flatten() == rec.terminal.flatten());
  CHECK(back.initial.flatten() == rec.initial.flatten());
  CHECK(run_spec_to_json(back.spec) == run_spec_to_json(rec.spec));
  CHECK_FALSE(back.diverged);

  const auto& t = back.diagnostics;
  CHECK(t.columns == diagnostics_columns(rec.block_names));
  CHECK(t.size() == rec.rows.size() * rec.rows[0].charges.size());
  CHECK(t.step_rows().size() == rec.rows.size());
  auto rows = t.rows_for(rec.rows[0].charges[1].id);
  REQUIRE(rows.size() == rec.rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(t.column("C")[rows[i]] == rec.rows[i].charges[1].C);
    CHECK(t.column("loss")[rows[i]] == rec.rows[i].loss);
  }
  CHECK_THROWS_AS(t.column("no_such_column"), ParseError);
  CHECK(diagnostics_to_string(parse_diagnostics(diagnostics_csv(rec))) == diagnostics_csv(rec));
}

TEST_CASE("experiment execution writes the documented layout") {
  auto root = testutil::scratch("execute");
  ExecuteOptions opts;
  opts.out_root = root;
  opts.threads = 2;
  auto outcome = execute_experiment(small_config(), opts);
  const fs::path dir = root / "small";
  CHECK(outcome.dir == dir);
  for (const char* f : {"experiment.json", "report.json", "report.txt", "sgd/manifest.json", "gd/diagnostics.csv",
                        "lr_0/manifest.json", "lr_1/diagnostics.csv", "sgd/matrix_W_Sbar_x_Wt.csv"}) {
    CAPTURE(f);
    CHECK(fs::exists(dir / f));
  }
  CHECK(outcome.report.runs.size() == 4);
  CHECK(outcome.report.all_pass());
  CHECK_FALSE(outcome.report.prediction_files.empty());
  for (const auto& f : outcome.report.prediction_files) CHECK(fs::exists(dir / f));

  Json rep = Json::parse(std::ifstream(dir / "report.json"));
  CHECK(rep["experiment"] == "small");
  CHECK(rep["rows"].size() == outcome.report.rows.size());

  auto again = report_from_dirs({dir});
  CHECK(again.rows.size() == outcome.report.rows.size());
  auto loaded = load_runs_below(dir);
  CHECK(loaded.size() == 4);
  CHECK(loaded[2].sweep.has_value());
  CHECK(loaded[2].sweep->axis == "optim.lr");
}

TEST_CASE("seed override changes every run") {
  auto root = testutil::scratch("seed_override");
  auto cfg = small_config();
  cfg.sweeps.clear();
  cfg.predictions.clear();
  ExecuteOptions opts;
  opts.out_root = root / "a";
  execute_experiment(cfg, opts);
  opts.out_root = root / "b";
  opts.seed = 42;
  execute_experiment(cfg, opts);
  auto a = load_run(root / "a" / "small" / "sgd");
  auto b = load_run(root / "b" / "small" / "sgd");
  CHECK(b.spec.optim.seed == 42);
  CHECK(a.terminal.flatten() != b.terminal.flatten());
}

TEST_CASE("empty report is an error") {
  auto dir = testutil::scratch("empty_report");
  CHECK_THROWS_AS(report_from_dirs({dir}), ConfigError);
}

TEST_CASE("output root precedence") {
  auto cfg = small_config();
  ::unsetenv("NOISE_LAB_OUT");
  CHECK(resolve_output_root(std::nullopt, cfg) == fs::path("noise_lab_out"));
  ::setenv("NOISE_LAB_OUT", "/tmp/from_env", 1);
  CHECK(resolve_output_root(std::nullopt, cfg) == fs::path("/tmp/from_env"));
  cfg.output_dir = "/tmp/from_config";
  CHECK(resolve_output_root(std::nullopt, cfg) == fs::path("/tmp/from_config"));
  CHECK(resolve_output_root(std::string("/tmp/explicit"), cfg) == fs::path("/tmp/explicit"));
  ::unsetenv("NOISE_LAB_OUT");
}

TEST_CASE("command line exit codes") {
  auto dir = testutil::scratch("cli");
  write_text(dir / "small.yaml", kSmallExperiment);
  write_text(dir / "missing.yaml", replace(kSmallExperiment, "    n: 64\n", ""));
  write_text(dir / "narrow.yaml", replace(replace(kSmallExperiment, "d: 4, d_y: 2", "d: 1, d_y: 2"),
                                          "kind: balanced_global_minimum, name: balanced",
                                          "kind: balanced_global_minimum, name: narrow"));
  fs::create_directories(dir / "empty");

  CHECK(cli("--help") == 0);
  CHECK(cli("") == 2);
  CHECK(cli("run --config " + (dir / "missing.yaml").string() + " --out " + (dir / "o").string()) == 2);
  CHECK(cli("run --config " + (dir / "nope.yaml").string()) == 2);
  CHECK(cli("verify no-such-suite") == 2);
  CHECK(cli("predict --config " + (dir / "narrow.yaml").string() + " --out " + (dir / "o").string()) == 1);
  CHECK(cli("report " + (dir / "empty").string()) == 2);
  CHECK(cli("run --config " + (dir / "small.yaml").string() + " --threads 2 --seed 3",
            "NOISE_LAB_OUT=" + (dir / "env").string()) == 0);
  CHECK(fs::exists(dir / "env" / "small" / "report.json"));
  CHECK(cli("sweep --config " + (dir / "small.yaml").string() + " --out " + (dir / "s").string() +
            " --axis optim.batch_size --values 2,8") == 0);
  CHECK(fs::exists(dir / "s" / "small" / "sweepoptim_batch_size_1" / "manifest.json"));
  CHECK(cli("sweep --config " + (dir / "small.yaml").string() + " --out " + (dir / "s").string() +
            " --axis optim.batch_size --values 2.5") == 2);
  CHECK(cli("predict --config " + (dir / "small.yaml").string() + " --out " + (dir / "p").string()) == 0);
  CHECK(cli("report " + (dir / "env" / "small").string() + " --out " + (dir / "r").string()) == 0);
  CHECK(fs::exists(dir / "r" / "report.json"));
  CHECK(cli("verify lemma-transport") == 0);
}
