#pragma once

#include "noiselab/optim.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace noiselab {

using Json = nlohmann::ordered_json;

Json model_to_json(const ModelSpec& spec);
ModelSpec model_from_json(const Json& j, const std::string& path);
Json data_to_json(const DataSpec& spec);
DataSpec data_from_json(const Json& j, const std::string& path);
Json optim_to_json(const OptimConfig& cfg);
OptimConfig optim_from_json(const Json& j, const std::string& path);
Json init_to_json(const InitSpec& init);
InitSpec init_from_json(const Json& j, const std::string& path);
Json symmetry_to_json(const SymmetryDescriptor& desc);
// Accepts a list of descriptors; {type: declared} expands to the model's declared set.
std::vector<SymmetryDescriptor> symmetries_from_json(const Json& j, const ModelSpec& model, const std::string& path);

// Every field explicit.
Json run_spec_to_json(const RunSpec& spec);
RunSpec run_spec_from_json(const Json& j, const std::string& path);

struct RunEntry {
  std::string id;
  Json overrides = Json::object();
  bool expect_divergence = false;
};

struct SweepEntry {
  std::string id;
  std::string axis;
  std::vector<double> values;
  Json overrides = Json::object();
};

struct CheckSpec {
  std::string kind;
  std::string anchor;
  Json params = Json::object();
};

struct PredictionSpec {
  std::string kind;
  std::string name;
  Json params = Json::object();
};

// One experiment: shared defaults, named runs and sweeps that patch them,
// analytic predictions, and declared pass/fail checks.
struct ExperimentConfig {
  std::string id;
  std::string anchor;
  std::string description;
  std::vector<std::string> scaled;  // desk-scale substitutions
  Json defaults = Json::object();
  std::vector<RunEntry> runs;
  std::vector<SweepEntry> sweeps;
  std::vector<PredictionSpec> predictions;
  std::vector<CheckSpec> checks;
  std::string output_dir;

  // Resolved spec of a named run (defaults merged with its overrides).
  RunSpec resolve_run(const RunEntry& entry) const;
  RunSpec resolve_sweep_base(const SweepEntry& entry) const;
};

Json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const Json& j);

ExperimentConfig load_experiment(const std::filesystem::path& path);
void save_experiment(const std::filesystem::path& path, const ExperimentConfig& cfg);

// YAML text <-> JSON tree; plain scalars become numbers/bools where they parse.
Json yaml_to_json(const std::string& text);
std::string json_to_yaml(const Json& j);

}  // namespace noiselab
