#include "noiselab/equilibria.hpp"

#include "noiselab/errors.hpp"

#include <algorithm>
#include <cmath>

namespace noiselab {

namespace {

void check_square_sym(const Matrix& m, Index n, const char* what) {
  if (m.rows() != n || m.cols() != n) {
    throw ConfigError(std::string(what) + " must be " + std::to_string(n) + " x " + std::to_string(n));
  }
}

struct Svd {
  Matrix L;  // left vectors, rank columns
  Vector s;
  Matrix R;  // right vectors transposed, rank rows
  Index rank = 0;
};

Svd thin_svd(const Matrix& M) {
  Eigen::JacobiSVD<Matrix> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  Svd out;
  const double smax = s.size() ? s(0) : 0.0;
  for (Index i = 0; i < s.size(); ++i)
    if (s(i) > 1e-10 * smax) ++out.rank;
  out.L = svd.matrixU().leftCols(out.rank);
  out.s = s.head(out.rank);
  out.R = svd.matrixV().leftCols(out.rank).transpose();
  return out;
}

double normalized_residual(const Matrix& a, const Matrix& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-30});
  return (a - b).norm() / denom;
}

}  // namespace

GammaPair gamma_pair(const Matrix& U, const Matrix& W, const Dataset& data, double gamma) {
  if (data.size() == 0) throw ConfigError("gamma_pair needs a nonempty dataset");
  if (U.cols() != W.rows() || W.cols() != data.input_dim() || U.rows() != data.output_dim()) {
    throw ConfigError("gamma_pair: U, W and data shapes are inconsistent");
  }
  const double n = static_cast<double>(data.size());
  const Matrix R = U * (W * data.X()) - data.Y();
  const Vector rn2 = R.colwise().squaredNorm().transpose();
  const Vector xn2 = data.X().colwise().squaredNorm().transpose();
  GammaPair p;
  p.gamma_W = symmetrize(data.X() * rn2.asDiagonal() * data.X().transpose() / n);
  p.gamma_U = symmetrize(R * xn2.asDiagonal() * R.transpose() / n);
  p.gamma_W.diagonal().array() += 2.0 * gamma;
  p.gamma_U.diagonal().array() += 2.0 * gamma;
  return p;
}

double balance_residual(const Matrix& U, const Matrix& W, const GammaPair& pair) {
  check_square_sym(pair.gamma_W, W.cols(), "Gamma_W");
  check_square_sym(pair.gamma_U, U.rows(), "Gamma_U");
  if (U.cols() != W.rows()) throw ConfigError("balance_residual: U and W do not compose");
  return normalized_residual(W * pair.gamma_W * W.transpose(), U.transpose() * pair.gamma_U * U);
}

double global_min_balance_residual(const Matrix& U, const Matrix& W, const Matrix& sigma_x,
                                   const Matrix& sigma_eps) {
  check_square_sym(sigma_x, W.cols(), "Sigma_x");
  check_square_sym(sigma_eps, U.rows(), "Sigma_eps");
  const double tx = sigma_x.trace();
  const double te = sigma_eps.trace();
  if (!(tx > 0.0) || !(te > 0.0)) throw NumericalError("covariance with zero trace");
  return normalized_residual(W * (sigma_x / tx) * W.transpose(), U.transpose() * (sigma_eps / te) * U);
}

BalancedFactorization balanced_global_minimum(const Matrix& V, const Matrix& sigma_x, const Matrix& sigma_eps,
                                              Index width) {
  check_square_sym(sigma_x, V.cols(), "Sigma_x");
  check_square_sym(sigma_eps, V.rows(), "Sigma_eps");
  const Matrix sx = sigma_x / sigma_x.trace();
  const Matrix se = sigma_eps / sigma_eps.trace();
  const Svd svd = thin_svd(psd_sqrt(se) * V * psd_sqrt(sx));
  if (svd.rank > width) throw NumericalError("rank exceeds width");
  const Matrix F = Matrix::Identity(width, svd.rank);
  const Vector root = svd.s.cwiseSqrt();
  BalancedFactorization out;
  out.rank = svd.rank;
  out.singular_values = svd.s;
  out.U = spd_inv_sqrt(se) * svd.L * root.asDiagonal() * F.transpose();
  out.W = F * root.asDiagonal() * svd.R * spd_inv_sqrt(sx);
  return out;
}

DeepLinearEquilibrium deep_linear_equilibrium(const Matrix& V, const Matrix& sigma_x, const Matrix& sigma_eps, int D,
                                              const std::vector<Index>& widths, const std::vector<Matrix>& frames,
                                              DeepLinearNormalization normalization) {
  if (D < 2) throw ConfigError("deep_linear_equilibrium needs depth D >= 2");
  if (static_cast<int>(widths.size()) != D - 1) throw ConfigError("need D - 1 inner widths");
  check_square_sym(sigma_x, V.cols(), "Sigma_x");
  check_square_sym(sigma_eps, V.rows(), "Sigma_eps");

  DeepLinearEquilibrium eq;
  eq.normalization = normalization;
  const Svd svd = thin_svd(psd_sqrt(sigma_eps) * V * psd_sqrt(sigma_x));
  eq.L = svd.L;
  eq.s_prime = svd.s;
  eq.R = svd.R;
  eq.rank = svd.rank;
  const Index d = svd.rank;
  if (d == 0) throw NumericalError("teacher has rank zero");
  for (Index w : widths) {
    if (w < d) throw NumericalError("rank exceeds width");
  }

  if (!frames.empty()) {
    if (static_cast<int>(frames.size()) != D - 1) throw ConfigError("need D - 1 frames");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (frames[i].rows() != widths[i] || frames[i].cols() != d) {
        throw ConfigError("frame " + std::to_string(i + 1) + " must be width x rank");
      }
      if ((frames[i].transpose() * frames[i] - Matrix::Identity(d, d)).norm() > 1e-10) {
        throw ConfigError("frame " + std::to_string(i + 1) + " is not orthonormal");
      }
    }
    eq.frames = frames;
  } else {
    for (Index w : widths) eq.frames.push_back(Matrix::Identity(w, d));
  }

  const double trS = svd.s.sum();
  const double dd = static_cast<double>(d);
  Vector s1, sD;
  if (normalization == DeepLinearNormalization::Published) {
    eq.c = std::pow(trS / dd, 1.0 / D);
    s1 = std::pow(dd / trS, (D - 2.0) / (2.0 * D)) * svd.s.cwiseSqrt();
    sD = s1;
  } else {
    const double tx = sigma_x.trace();
    const double te = sigma_eps.trace();
    const double kappa = std::sqrt(te / tx);
    eq.c = std::pow(trS / std::sqrt(tx * te), 1.0 / D);
    s1 = svd.s.cwiseSqrt() / (std::sqrt(kappa) * std::pow(eq.c, (D - 2.0) / 2.0));
    sD = kappa * s1;
  }

  eq.sigmas.push_back(s1);
  eq.layers.push_back(eq.frames.front() * s1.asDiagonal() * svd.R * spd_inv_sqrt(sigma_x));
  for (int i = 2; i < D; ++i) {
    eq.sigmas.push_back(Vector::Constant(d, eq.c));
    eq.layers.push_back(eq.c * eq.frames[static_cast<std::size_t>(i - 1)] *
                        eq.frames[static_cast<std::size_t>(i - 2)].transpose());
  }
  eq.sigmas.push_back(sD);
  eq.layers.push_back(spd_inv_sqrt(sigma_eps) * svd.L * sD.asDiagonal() * eq.frames.back().transpose());
  return eq;
}

std::vector<double> deep_linear_stationarity_residuals(const std::vector<Matrix>& layers, const Matrix& sigma_x,
                                                       const Matrix& sigma_eps) {
  const std::size_t D = layers.size();
  std::vector<double> out;
  for (std::size_t i = 1; i < D; ++i) {
    // Layers W_i and W_{i+1} are layers[i-1] and layers[i].
    Matrix h = Matrix::Identity(sigma_x.rows(), sigma_x.rows());
    for (std::size_t k = 0; k + 1 < i; ++k) h = layers[k] * h;
    Matrix xi = Matrix::Identity(sigma_eps.rows(), sigma_eps.rows());
    for (std::size_t k = D - 1; k > i; --k) xi = xi * layers[k];
    const Matrix out_cov = xi.transpose() * sigma_eps * xi;
    const Matrix in_cov = h * sigma_x * h.transpose();
    const Matrix lhs = layers[i].transpose() * out_cov * layers[i] / out_cov.trace();
    const Matrix rhs = layers[i - 1] * in_cov * layers[i - 1].transpose() / in_cov.trace();
    out.push_back(normalized_residual(lhs, rhs));
  }
  return out;
}

double sharpness(const Matrix& U, const Matrix& W, const Matrix& sigma_x, Index d_y) {
  check_square_sym(sigma_x, W.cols(), "Sigma_x");
  return static_cast<double>(d_y) * (W * psd_sqrt(sigma_x)).squaredNorm() + U.squaredNorm() * sigma_x.trace();
}

SharpnessEndpoints sharpness_init_end(Index d, Index d_x, Index d_y, double sigma_U2, double sigma_W2,
                                      double trace_sigma_x) {
  if (d < 1 || d_x < 1 || d_y < 1) throw ConfigError("sharpness_init_end needs positive dims");
  SharpnessEndpoints e;
  e.s_init = static_cast<double>(d_x) * static_cast<double>(d) * (sigma_U2 + sigma_W2) * trace_sigma_x;
  e.s_end = 2.0 * static_cast<double>(std::min(d, d_x)) * trace_sigma_x;
  return e;
}

ApproxSymmetryDeviation approx_symmetry_deviation(const BoundSymmetry& sym, const Matrix& sigma, double sigma2,
                                                  double zeta, double h_star, const Vector& n,
                                                  const Vector& theta_star) {
  const Vector a_theta = sym.apply(theta_star);
  const double denom = zeta * h_star * n.dot(a_theta);
  const double scale = std::abs(zeta * h_star) * n.norm() * a_theta.norm();
  if (!std::isfinite(denom) || denom == 0.0 || std::abs(denom) <= 1e-14 * scale) {
    throw NumericalError("undefined deviation: zeta h* n^T A theta* vanishes");
  }
  const double tr = sym.trace_with(sigma);
  ApproxSymmetryDeviation out;
  out.s = sigma2 * tr / denom;
  out.c_deviation = 2.0 * sigma2 * tr / (zeta * h_star);
  return out;
}

}  // namespace noiselab
