#pragma once

#include "noiselab/config.hpp"
#include "noiselab/optim.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace noiselab {

// Column layout of diagnostics.csv. One line per (recorded step, charge);
// runs without charges get one line per step with an empty charge_id.
std::vector<std::string> diagnostics_columns(const std::vector<std::string>& block_names);
std::string diagnostics_csv(const RunRecord& rec);

Json params_to_json(const ParamBlocks& params);
ParamBlocks params_from_json(const Json& j);

struct SweepMembership {
  std::string sweep_id;
  std::string axis;
  double value = 0.0;
  Index index = 0;
};

// Summary and provenance written next to the diagnostics.
Json run_manifest(const RunRecord& rec, const std::string& experiment_id, bool expect_divergence,
                  const std::optional<SweepMembership>& sweep);

// Writes <dir>/manifest.json, <dir>/diagnostics.csv and, for two-layer linear
// models, the terminal representation matrices.
void save_run(const std::filesystem::path& dir, const RunRecord& rec, const std::string& experiment_id,
              bool expect_divergence, const std::optional<SweepMembership>& sweep);

// Diagnostics table read back from CSV.
struct DiagnosticsTable {
  std::vector<std::string> columns;
  std::vector<std::string> charge_id;
  std::map<std::string, std::vector<double>> values;

  std::size_t size() const { return charge_id.size(); }
  const std::vector<double>& column(const std::string& name) const;  // throws ParseError
  // Rows belonging to one charge (or all rows when the table has no charges).
  std::vector<std::size_t> rows_for(const std::string& charge) const;
  // One row per recorded step.
  std::vector<std::size_t> step_rows() const;
};

std::string diagnostics_to_string(const DiagnosticsTable& t);
DiagnosticsTable parse_diagnostics(const std::string& text);

struct LoadedRun {
  std::filesystem::path dir;
  Json manifest;
  RunSpec spec;
  ParamBlocks initial;
  ParamBlocks terminal;
  bool diverged = false;
  bool expect_divergence = false;
  std::optional<Index> divergence_step;
  std::optional<SweepMembership> sweep;
  DiagnosticsTable diagnostics;

  const std::string& run_id() const { return spec.run_id; }
};

LoadedRun load_run(const std::filesystem::path& dir);

// Terminal W Sbar_x W^T and U^T Sbar_eps U for a two-layer linear run, using the
// population covariances of the data spec.
std::pair<Matrix, Matrix> representation_matrices(const RunSpec& spec, const ParamBlocks& params);

}  // namespace noiselab
