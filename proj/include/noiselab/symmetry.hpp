#pragma once

#include "noiselab/descriptor.hpp"
#include "noiselab/models.hpp"
#include "noiselab/noise.hpp"

#include <optional>
#include <string>
#include <vector>

namespace noiselab {

double charge(const SymmetryDescriptor& desc, const ParamBlocks& params);
ParamBlocks exp_map(const SymmetryDescriptor& desc, double lambda, const ParamBlocks& params);

// G = -4 gamma C + sigma2 Tr[Sigma A].
double noether_flow_rate(const SymmetryDescriptor& desc, const NoiseStats& stats, const ParamBlocks& params,
                         double gamma, double sigma2);

// Per-mode data entering the flow along the symmetry orbit:
// mu_i, sigma_i^2 = n_i^T Sigma n_i, theta_i^2 = (n_i^T theta)^2.
struct SpectralTerm {
  double mu = 0.0;
  double noise_var = 0.0;
  double proj_sq = 0.0;
};

std::vector<SpectralTerm> spectral_terms(const BoundSymmetry& sym, const Vector& theta, const Matrix& grads);

// G(theta_lambda) = I1(lambda) - I2(lambda) as a sum of exponentials:
//   I1 = sum a_j e^{-2 lambda r_j},  I2 = sum b_j e^{+2 lambda r_j},  r_j = |mu_j| > 0.
// I1 collects noise on mu > 0 and decay on mu < 0; I2 the opposite.
class ChargeFlowProfile {
 public:
  ChargeFlowProfile(const std::vector<SpectralTerm>& terms, double gamma, double sigma2);

  double value(double lambda) const;
  double decreasing_part(double lambda) const;  // I1
  double increasing_part(double lambda) const;  // I2
  // log I1 - log I2, finite for any lambda when both parts are nonzero.
  double log_ratio(double lambda) const;
  bool first_vanishes() const { return a_.empty(); }
  bool second_vanishes() const { return b_.empty(); }
  double max_rate() const { return max_rate_; }

 private:
  struct Term {
    double log_coef;
    double rate;
  };
  static double log_sum(const std::vector<Term>& terms, double lambda, double sign);
  std::vector<Term> a_;
  std::vector<Term> b_;
  double max_rate_ = 0.0;
};

enum class LambdaStatus { Root, DegenerateEverywhereZero, Boundary, Saturated };
std::string lambda_status_name(LambdaStatus s);

struct LambdaStar {
  double lambda = 0.0;  // may be +-infinity
  LambdaStatus status = LambdaStatus::Root;
  int iterations = 0;
  // |I1 - I2| / (I1 + I2) at the returned point (0 for non-root statuses).
  double relative_residual = 0.0;
};

// Bracket expansion from [-1, 1] by doubling up to |lambda| = 700 / max|mu|,
// then bisection to relative residual 1e-12 or width 1e-12.
LambdaStar find_lambda_star(const ChargeFlowProfile& profile);

LambdaStar solve_lambda_star(const SymmetryDescriptor& desc, const ParamBlocks& params, const Matrix& grads,
                             double gamma, double sigma2);

struct FlowSignRecord {
  LambdaStar lambda_star;
  double G = 0.0;
  double C = 0.0;
  std::optional<double> C_star;
  int sign_G = 0;
  int sign_C_minus_C_star = 0;
  // sign(G) == -sign(C - C*) whenever both are nonzero.
  bool consistent = true;
};

FlowSignRecord flow_sign_check(const SymmetryDescriptor& desc, const ParamBlocks& params, const Matrix& grads,
                               double gamma, double sigma2);

// Charge diagnostics for one descriptor along a run.
struct ChargeSeries {
  std::string charge_id;
  std::vector<Index> steps;
  std::vector<double> time;
  std::vector<double> C;
  std::vector<double> G;
  std::vector<double> dCdt;
  std::vector<double> lambda_star;
  std::vector<double> rel_dist;

  bool aligned() const;
};

// Exact symmetries carried by each model family.
std::vector<SymmetryDescriptor> declared_symmetries(const ModelSpec& spec);

}  // namespace noiselab
