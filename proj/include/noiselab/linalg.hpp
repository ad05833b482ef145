#pragma once

#include <Eigen/Dense>

#include <vector>

namespace noiselab {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

Matrix symmetrize(const Matrix& m);
// Symmetric PSD square root; negative eigenvalues are clamped to zero.
Matrix psd_sqrt(const Matrix& m);
// Inverse square root of a symmetric positive definite matrix.
Matrix spd_inv_sqrt(const Matrix& m);

// Frobenius-normalized difference ||a - b|| / max(||a||, ||b||, floor).
double relative_difference(const Matrix& a, const Matrix& b, double floor = 1e-30);

// Least-squares slope of y against x, plus its standard error.
struct SlopeFit {
  double slope = 0.0;
  double stderr_slope = 0.0;
};
SlopeFit least_squares_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace noiselab
