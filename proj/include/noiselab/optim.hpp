#pragma once

#include "noiselab/data.hpp"
#include "noiselab/descriptor.hpp"
#include "noiselab/models.hpp"
#include "noiselab/symmetry.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace noiselab {

enum class Algorithm { GD, SGD };
std::string algorithm_name(Algorithm a);

// Step (eta_start until switch_step, then eta_end) or linear ramp over [0, switch_step].
struct Warmup {
  enum class Shape { Step, Linear };
  double start = 0.0;
  double end = 0.0;
  Index switch_step = 0;
  Shape shape = Shape::Step;
};

struct DiagnosticsConfig {
  Index cadence = 10;
  // Charge-flow prediction from the per-sample gradient noise on the full dataset.
  bool noise = true;
  bool lambda_star = false;
  // Two-layer linear models only.
  bool sharpness = false;
  bool balance = false;
  Index slope_window = 200;
};

struct OptimConfig {
  Algorithm algorithm = Algorithm::SGD;
  double lr = 0.01;
  Index batch_size = 1;
  double weight_decay = 0.0;
  Index steps = 0;
  std::optional<Warmup> warmup;
  std::uint64_t seed = 0;
  DiagnosticsConfig diagnostics;
  double divergence_norm2 = 1e12;
};

void validate(const OptimConfig& cfg, Index dataset_size);
double learning_rate_at(const OptimConfig& cfg, Index step);
// sigma^2 = eta / (2 S); GD uses S = n.
double noise_scale(const OptimConfig& cfg, Index step, Index dataset_size);

struct StepResult {
  ParamBlocks params;
  Vector grad;  // mean gradient used for the update
};

StepResult sgd_step(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data,
                    const std::vector<Index>& batch, double lr, double gamma);
StepResult gd_step(const ModelSpec& spec, const ParamBlocks& params, const Dataset& data, double lr, double gamma);
// Full-batch step for linear families through precomputed data moments.
StepResult gd_step(const ModelSpec& spec, const ParamBlocks& params, const DataMoments& moments, double lr,
                   double gamma);

// Batch for a given step, uniform with replacement, addressed by (seed, step).
std::vector<Index> draw_batch(std::uint64_t seed, Index step, Index batch_size, Index dataset_size);

struct RunSpec {
  std::string run_id = "run";
  ModelSpec model = TwoLayerLinear{};
  InitSpec init;
  DataSpec data;
  OptimConfig optim;
  std::vector<SymmetryDescriptor> symmetries;
  // When set, samples are read from this CSV instead of generated.
  std::string dataset_csv;
};

// Dataset for a spec: loaded from dataset_csv or generated from spec.data.
Dataset materialize_dataset(const RunSpec& spec);

struct ChargeRow {
  std::string id;
  double C = 0.0;
  double G_pred = 0.0;
  double dCdt = 0.0;
  double lambda_star = 0.0;
  double rel_dist = 0.0;
};

struct DiagnosticRow {
  Index step = 0;
  double lr = 0.0;
  double time = 0.0;
  double loss = 0.0;
  double sharpness = 0.0;
  double balance_residual = 0.0;
  std::vector<double> block_norm2;
  std::vector<ChargeRow> charges;
};

struct RunRecord {
  RunSpec spec;
  std::string rng_name;
  std::vector<std::string> block_names;
  std::vector<DiagnosticRow> rows;
  ParamBlocks initial;
  ParamBlocks terminal;
  Index steps_completed = 0;
  bool diverged = false;
  std::optional<Index> divergence_step;

  std::vector<ChargeSeries> charge_series() const;
};

// Called after every update with (step, params before, mean gradient, params after, lr).
using StepObserver = std::function<void(Index, const ParamBlocks&, const Vector&, const ParamBlocks&, double)>;

RunRecord run(const RunSpec& spec);
RunRecord run(const RunSpec& spec, const Dataset& data, const ParamBlocks& init,
              const StepObserver& observer = nullptr);

// Sets one named field ("optim.lr", "optim.batch_size", "data.phi_x", ...).
RunSpec with_axis_value(const RunSpec& base, const std::string& axis, double value);
std::vector<std::string> sweep_axes();

// Member i uses seed base + i (unless the axis is the seed) and id <base>_<i>.
std::vector<RunSpec> sweep_specs(const RunSpec& base, const std::string& axis, const std::vector<double>& values);
// Members of sweep_specs run on up to `threads` workers.
std::vector<RunRecord> sweep(const RunSpec& base, const std::string& axis, const std::vector<double>& values,
                             int threads = 1);

}  // namespace noiselab
