#pragma once

#include "noiselab/data.hpp"
#include "noiselab/models.hpp"
#include "noiselab/optim.hpp"

#include <string>
#include <vector>

namespace noiselab {

struct VerifyCheck {
  std::string suite;
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string notes;
};

// A small instance of every model family, with matching data.
struct ToyCase {
  std::string name;
  ModelSpec model;
  DataSpec data;
};
std::vector<ToyCase> toy_cases();

std::vector<std::string> verify_suites();
bool is_verify_suite(const std::string& name);
// "all" runs every suite. Throws ConfigError for unknown names.
std::vector<VerifyCheck> run_verify_suite(const std::string& name, std::uint64_t seed = 0);

// Worst normalized per-step violation of dC = eta^2 g^T A g over a run.
struct ChargeIdentityResult {
  double worst = 0.0;  // max |dC - eta^2 g^T A g| / (|C| + eta^2 |g|^2)
  Index steps = 0;
};
ChargeIdentityResult charge_identity_worst(const RunSpec& spec, const SymmetryDescriptor& sym);

// Total |C_T - C_0| of a GD run, per declared symmetry (max over symmetries).
double gd_charge_drift(const RunSpec& spec, const SymmetryDescriptor& sym);

// |Tr[Sigma(theta_lambda) A] - Tr[e^{-2 lambda A} Sigma(theta) A]| relative, with a dense oracle.
double covariance_transport_error(const ModelSpec& model, const ParamBlocks& theta, const Dataset& data,
                                  const SymmetryDescriptor& sym, double lambda);

// Relative finite-difference error of per_sample_grad (central differences, step h).
double finite_difference_error(const ModelSpec& model, const ParamBlocks& params, const Sample& sample, double gamma,
                               double h = 1e-6);

// Root of the closed-form flow profile located by scanning a uniform grid.
struct GridRoot {
  bool found = false;
  double lambda = 0.0;
  int sign_changes = 0;
  bool non_increasing = true;
};
GridRoot grid_scan_root(const std::vector<SpectralTerm>& terms, double gamma, double sigma2, double lo, double hi,
                        Index points);

}  // namespace noiselab
