#pragma once

#include "noiselab/config.hpp"
#include "noiselab/record_io.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace noiselab {

// One measured-vs-threshold comparison, tagged with the figure or equation it reproduces.
struct ReportRow {
  std::string anchor;
  std::string check;
  std::string subject;
  double measured = 0.0;
  double threshold = 0.0;
  bool pass = false;
  bool scaled = false;  // run at reduced size relative to the published setting
  std::string notes;
};

struct RunSummary {
  std::string run_id;
  std::string sweep_id;
  bool diverged = false;
  bool expect_divergence = false;
  std::optional<Index> divergence_step;
  Index steps_completed = 0;
  double final_loss = 0.0;
};

struct ExperimentReport {
  std::string experiment_id;
  std::string anchor;
  std::vector<std::string> scaled;
  std::vector<RunSummary> runs;
  std::vector<ReportRow> rows;
  std::vector<std::string> prediction_files;

  bool all_pass() const;
  // Runs that diverged without being declared as expected to.
  std::vector<std::string> unexpected_divergences() const;
};

Json report_to_json(const ExperimentReport& report);
std::string report_table(const ExperimentReport& report);

// Output root: explicit value, else the config's output_dir, else $NOISE_LAB_OUT, else ./noise_lab_out.
std::filesystem::path resolve_output_root(const std::optional<std::string>& explicit_root,
                                          const ExperimentConfig& cfg);

struct ExecuteOptions {
  std::filesystem::path out_root;
  std::optional<std::uint64_t> seed;  // replaces optim.seed in every run
  int threads = 1;
  bool runs = true;
  bool sweeps = true;
  bool predictions = true;
};

struct ExperimentOutcome {
  std::filesystem::path dir;
  ExperimentReport report;
};

// Runs the selected parts of an experiment under <out_root>/<id>, then
// evaluates its checks and writes report.json and report.txt.
ExperimentOutcome execute_experiment(const ExperimentConfig& cfg, const ExecuteOptions& opts);

// Prediction CSVs for one request; returns the files written.
// Throws NumericalError("rank exceeds width") for infeasible deep-linear widths.
std::vector<std::filesystem::path> write_prediction(const ExperimentConfig& cfg, const PredictionSpec& pred,
                                                    const std::filesystem::path& dir,
                                                    std::vector<ReportRow>* rows = nullptr);

// Evaluates declared checks against persisted runs. Checks whose subjects are
// absent are skipped.
std::vector<ReportRow> evaluate_checks(const ExperimentConfig& cfg, const std::vector<LoadedRun>& runs);

// Report over experiment directories (with experiment.json) or bare run directories.
// Throws ConfigError when no runs are found.
ExperimentReport report_from_dirs(const std::vector<std::filesystem::path>& dirs);

// Loads every run directory (one containing manifest.json) below dir, sorted by path.
std::vector<LoadedRun> load_runs_below(const std::filesystem::path& dir);

}  // namespace noiselab
