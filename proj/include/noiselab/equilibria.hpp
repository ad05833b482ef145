#pragma once

#include "noiselab/data.hpp"
#include "noiselab/descriptor.hpp"
#include "noiselab/linalg.hpp"

#include <optional>
#include <vector>

namespace noiselab {

// Residual-weighted second moments of a two-layer factorization:
//   Gamma_W = E[|r|^2 x x^T] + 2 gamma I,  Gamma_U = E[|x|^2 r r^T] + 2 gamma I,  r = U W x - y.
struct GammaPair {
  Matrix gamma_W;  // d_x x d_x
  Matrix gamma_U;  // d_y x d_y
};

GammaPair gamma_pair(const Matrix& U, const Matrix& W, const Dataset& data, double gamma);

// |W Gw W^T - U^T Gu U| / max(|W Gw W^T|, |U^T Gu U|, 1e-30).
double balance_residual(const Matrix& U, const Matrix& W, const GammaPair& pair);

// Same with the trace-normalized covariances Sigma_x / Tr, Sigma_eps / Tr.
double global_min_balance_residual(const Matrix& U, const Matrix& W, const Matrix& sigma_x, const Matrix& sigma_eps);

// Balanced two-layer global minimum U W = V with W Sbar_x W^T = U^T Sbar_eps U,
// inner frame = first columns of the identity.
struct BalancedFactorization {
  Matrix U;
  Matrix W;
  Vector singular_values;  // of Sbar_eps^{1/2} V Sbar_x^{1/2}
  Index rank = 0;
};
BalancedFactorization balanced_global_minimum(const Matrix& V, const Matrix& sigma_x, const Matrix& sigma_eps,
                                              Index width);

// How the outer singular values are normalized.
//   TraceBalanced: stationary for any input / noise traces (default).
//   Published: Sigma_1 = Sigma_D = (d / Tr S')^{(D-2)/2D} sqrt(S'); stationary only
//              when Tr Sigma_x = Tr Sigma_eps = rank.
enum class DeepLinearNormalization { TraceBalanced, Published };

struct DeepLinearEquilibrium {
  std::vector<Matrix> layers;   // W_1 .. W_D
  Matrix L;                     // d_y x d
  Vector s_prime;               // singular values of V', non-increasing
  Matrix R;                     // d x d_x
  Index rank = 0;
  std::vector<Vector> sigmas;   // diagonals of Sigma_1 .. Sigma_D
  std::vector<Matrix> frames;   // U_1 .. U_{D-1}
  double c = 1.0;               // interior singular value
  DeepLinearNormalization normalization = DeepLinearNormalization::TraceBalanced;
};

// widths: inner widths d_1 .. d_{D-1}. frames (optional): U_i of shape d_i x rank
// with orthonormal columns. Throws NumericalError "rank exceeds width" when infeasible.
DeepLinearEquilibrium deep_linear_equilibrium(const Matrix& V, const Matrix& sigma_x, const Matrix& sigma_eps, int D,
                                              const std::vector<Index>& widths,
                                              const std::vector<Matrix>& frames = {},
                                              DeepLinearNormalization normalization =
                                                  DeepLinearNormalization::TraceBalanced);

// Relative residual, for each adjacent pair (i, i+1), of the global-minimum
// noise-equilibrium condition between layers i and i+1.
std::vector<double> deep_linear_stationarity_residuals(const std::vector<Matrix>& layers, const Matrix& sigma_x,
                                                       const Matrix& sigma_eps);

// Tr of the Hessian diagonal blocks: d_y |W Sigma_x^{1/2}|^2 + |U|^2 Tr Sigma_x.
double sharpness(const Matrix& U, const Matrix& W, const Matrix& sigma_x, Index d_y);

struct SharpnessEndpoints {
  double s_init = 0.0;
  double s_end = 0.0;
};
// Expected trace at a Gaussian init and at the global minimum:
//   S_init = d_x d (sU2 + sW2) Tr Sigma_x,  S_end = 2 min(d, d_x) Tr Sigma_x.
SharpnessEndpoints sharpness_init_end(Index d, Index d_x, Index d_y, double sigma_U2, double sigma_W2,
                                      double trace_sigma_x);

// Shift of a local minimum theta* along Hessian eigenvector n (eigenvalue h*)
// under a symmetry broken with strength zeta:
//   s = sigma2 Tr[Sigma A] / (zeta h* n^T A theta*),  C - C* = 2 sigma2 Tr[Sigma A] / (zeta h*).
struct ApproxSymmetryDeviation {
  double s = 0.0;
  double c_deviation = 0.0;
};
ApproxSymmetryDeviation approx_symmetry_deviation(const BoundSymmetry& sym, const Matrix& sigma, double sigma2,
                                                  double zeta, double h_star, const Vector& n,
                                                  const Vector& theta_star);

}  // namespace noiselab
