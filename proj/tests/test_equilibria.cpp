#include "noiselab/data.hpp"
#include "noiselab/equilibria.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/models.hpp"
#include "noiselab/noise.hpp"
#include "noiselab/symmetry.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <cmath>

using namespace noiselab;
using testutil::gaussian;

namespace {

DataSpec diagonal_data(const Matrix& V, const std::vector<double>& sx, const std::vector<double>& se, Index n,
                       std::uint64_t seed) {
  DataSpec d;
  d.d_x = V.cols();
  d.input.kind = InputSpec::Kind::Diagonal;
  d.input.diagonal = sx;
  d.teacher.kind = TeacherSpec::Kind::Explicit;
  d.teacher.matrix = V;
  d.teacher.d_y = V.rows();
  d.noise.diagonal = se;
  d.n = n;
  d.seed = seed;
  return d;
}

Matrix diag(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size())).asDiagonal();
}

Matrix orthonormal(CounterRng& rng, Index rows, Index cols) {
  Eigen::HouseholderQR<Matrix> qr(gaussian(rng, rows, cols));
  return qr.householderQ() * Matrix::Identity(rows, cols);
}

}  // namespace

TEST_CASE("residual-weighted moments by direct summation") {
  CounterRng rng(1, Stream::Test);
  Matrix X = gaussian(rng, 3, 20), Y = gaussian(rng, 2, 20);
  Matrix U = gaussian(rng, 2, 4), W = gaussian(rng, 4, 3);
  auto pair = gamma_pair(U, W, Dataset(X, Y), 0.1);
  Matrix gw = Matrix::Zero(3, 3), gu = Matrix::Zero(2, 2);
  for (Index s = 0; s < 20; ++s) {
    Vector r = U * W * X.col(s) - Y.col(s);
    gw += r.squaredNorm() * X.col(s) * X.col(s).transpose() / 20.0;
    gu += X.col(s).squaredNorm() * r * r.transpose() / 20.0;
  }
  gw += 0.2 * Matrix::Identity(3, 3);
  gu += 0.2 * Matrix::Identity(2, 2);
  CHECK(relative_difference(pair.gamma_W, gw) < 1e-12);
  CHECK(relative_difference(pair.gamma_U, gu) < 1e-12);
}

TEST_CASE("zero residual leaves only the weight-decay term") {
  CounterRng rng(2, Stream::Test);
  Matrix U = gaussian(rng, 2, 3), W = gaussian(rng, 3, 4), X = gaussian(rng, 4, 10);
  Dataset data(X, U * W * X);
  auto zero = gamma_pair(U, W, data, 0.0);
  CHECK(zero.gamma_W.norm() < 1e-12);
  CHECK(zero.gamma_U.norm() < 1e-12);
  auto wd = gamma_pair(U, W, data, 0.05);
  CHECK(relative_difference(wd.gamma_W, 0.1 * Matrix::Identity(4, 4)) < 1e-10);
  CHECK(relative_difference(wd.gamma_U, 0.1 * Matrix::Identity(2, 2)) < 1e-10);
  CHECK_THROWS_AS(gamma_pair(U, W, Dataset(X.topRows(3), U * W * X), 0.0), ConfigError);
}

TEST_CASE("moments at the global minimum approach the independent-noise limit") {
  CounterRng rng(3, Stream::Test);
  Matrix V = gaussian(rng, 2, 3);
  std::vector<double> sx{1.0, 2.0, 0.5}, se{0.3, 0.6};
  auto data = generate_dataset(diagonal_data(V, sx, se, 200000, 4));
  auto f = balanced_global_minimum(V, diag(sx), diag(se), 3);
  auto pair = gamma_pair(f.U, f.W, data, 0.0);
  CHECK(relative_difference(pair.gamma_W, 0.9 * diag(sx)) < 0.05);
  CHECK(relative_difference(pair.gamma_U, 3.5 * diag(se)) < 0.05);
}

TEST_CASE("balanced global minimum factorizes the teacher") {
  CounterRng rng(5, Stream::Test);
  Matrix V = gaussian(rng, 3, 4);
  Matrix sx = diag({1.0, 0.5, 2.0, 1.5}), se = diag({0.2, 0.4, 0.1});
  auto f = balanced_global_minimum(V, sx, se, 5);
  CHECK(f.rank == 3);
  CHECK(f.U.rows() == 3);
  CHECK(f.U.cols() == 5);
  CHECK(relative_difference(f.U * f.W, V) < 1e-12);
  CHECK(global_min_balance_residual(f.U, f.W, sx, se) < 1e-12);
  // Independent singular values of Sbar_eps^{1/2} V Sbar_x^{1/2}.
  Matrix M = (se / se.trace()).cwiseSqrt() * V * (sx / sx.trace()).cwiseSqrt();
  Eigen::JacobiSVD<Matrix> svd(M);
  CHECK((svd.singularValues() - f.singular_values).norm() < 1e-12);

  CHECK(global_min_balance_residual(2.0 * f.U, 0.5 * f.W, sx, se) > 0.5);
  CHECK_THROWS_AS(balanced_global_minimum(V, sx, se, 2), NumericalError);
  CHECK_THROWS_AS(global_min_balance_residual(f.U, f.W, Matrix::Zero(4, 4), se), NumericalError);
}

TEST_CASE("isotropic balance reduces to matched gram matrices") {
  CounterRng rng(6, Stream::Test);
  Matrix W = gaussian(rng, 3, 4);
  // U^T U / d_y = W W^T / d_x with d_y = 2 requires rank(W) <= 2.
  W.row(2).setZero();
  Eigen::SelfAdjointEigenSolver<Matrix> es(W * W.transpose() * (2.0 / 4.0));
  Matrix U = es.eigenvalues().cwiseMax(0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
  U = U.bottomRows(2).eval();
  CHECK(global_min_balance_residual(U, W, Matrix::Identity(4, 4), Matrix::Identity(2, 2)) < 1e-10);
}

TEST_CASE("symmetric construction balances trivially") {
  CounterRng rng(7, Stream::Test);
  Matrix W = gaussian(rng, 3, 3);
  Matrix G = gaussian(rng, 3, 3);
  GammaPair pair{G * G.transpose(), G * G.transpose()};
  CHECK(balance_residual(W.transpose(), W, pair) < 1e-14);
  CHECK(balance_residual(W.transpose() * 2.0, W, pair) > 0.5);
}

TEST_CASE("balance residual at the global minimum matches the closed form") {
  CounterRng rng(8, Stream::Test);
  Matrix V = gaussian(rng, 2, 3);
  std::vector<double> sx{1.0, 0.4, 1.6}, se{0.5, 0.2};
  auto data = generate_dataset(diagonal_data(V, sx, se, 200000, 9));
  auto f = balanced_global_minimum(V, diag(sx), diag(se), 4);
  CHECK(balance_residual(f.U, f.W, gamma_pair(f.U, f.W, data, 0.0)) < 0.05);
  // Off the balanced point both residuals agree on a random rebalancing.
  Matrix Q = orthonormal(rng, 4, 4);
  Matrix D = Vector::LinSpaced(4, 0.6, 1.5).asDiagonal();
  Matrix U = f.U * Q * D, W = D.inverse() * Q.transpose() * f.W;
  const double closed = global_min_balance_residual(U, W, diag(sx), diag(se));
  const double empirical = balance_residual(U, W, gamma_pair(U, W, data, 0.0));
  CHECK(closed > 0.1);
  CHECK(empirical == doctest::Approx(closed).epsilon(0.05));
}

TEST_CASE("sharpness matches the trace of the Hessian diagonal blocks") {
  CounterRng rng(10, Stream::Test);
  TwoLayerLinear model{3, 5, 2};
  Matrix X = gaussian(rng, 3, 40);
  X.row(1) *= 2.0;
  Dataset data(X, gaussian(rng, 2, 40));
  Matrix U = gaussian(rng, 2, 5), W = gaussian(rng, 5, 3);
  auto p = ParamBlocks::from_matrices({{"U", U}, {"W", W}});
  const Matrix sx = X * X.transpose() / 40.0;

  // Hessian of half the mean squared error, by central differences of the gradient.
  const Index P = p.dim();
  Matrix H(P, P);
  const double h = 1e-5;
  for (Index j = 0; j < P; ++j) {
    Vector a = p.flatten(), b = p.flatten();
    a(j) += h;
    b(j) -= h;
    H.col(j) = (mean_grad(model, p.unflatten(a), data, 0.0) - mean_grad(model, p.unflatten(b), data, 0.0)) / (4 * h);
  }
  const Index nu = 10;
  const Matrix HU = H.topLeftCorner(nu, nu), HW = H.bottomRightCorner(P - nu, P - nu);
  const double trace = HU.trace() + HW.trace();
  const double s = sharpness(U, W, sx, 2);
  CHECK(s == doctest::Approx(trace).epsilon(1e-6));

  Eigen::SelfAdjointEigenSolver<Matrix> eu(symmetrize(HU)), ew(symmetrize(HW));
  CHECK(s >= std::max(eu.eigenvalues().maxCoeff(), ew.eigenvalues().maxCoeff()));
}

TEST_CASE("sharpness by substitution") {
  CHECK(sharpness(Matrix::Zero(2, 3), Matrix::Zero(3, 3), Matrix::Identity(3, 3), 2) == 0.0);
  CHECK(sharpness(Matrix::Identity(3, 3), Matrix::Identity(3, 3), Matrix::Identity(3, 3), 3) ==
        doctest::Approx(3 * 3 + 3 * 3));
}

TEST_CASE("expected sharpness at init and at the end") {
  // Xavier variances 1/(fan_in + fan_out) at d = d_x = d_y give half the end value.
  auto x = sharpness_init_end(50, 50, 50, 1.0 / 100, 1.0 / 100, 50.0);
  CHECK(x.s_end == doctest::Approx(2 * 50 * 50.0));
  CHECK(x.s_init == doctest::Approx(0.5 * x.s_end));
  CHECK(x.s_init <= x.s_end);
  auto g = sharpness_init_end(50, 50, 50, 2.0 / 100, 2.0 / 100, 50.0);
  CHECK(g.s_init == doctest::Approx(g.s_end));
  // Output variance 1, input variance 1/d_x, wide hidden layer.
  for (Index d : {20, 200, 2000}) {
    auto k = sharpness_init_end(d, 10, 10, 1.0, 0.1, 10.0);
    CHECK(k.s_init >= k.s_end);
  }
  auto e1 = sharpness_init_end(30, 10, 10, 1.0, 0.1, 10.0);
  auto e2 = sharpness_init_end(30, 10, 10, 0.01, 0.3, 10.0);
  CHECK(e1.s_end == e2.s_end);
  CHECK_THROWS_AS(sharpness_init_end(0, 1, 1, 1, 1, 1), ConfigError);
}

TEST_CASE("deep linear construction with an identity teacher") {
  for (int D : {2, 3, 4, 6}) {
    auto eq = deep_linear_equilibrium(Matrix::Identity(3, 3), Matrix::Identity(3, 3), Matrix::Identity(3, 3), D,
                                      std::vector<Index>(static_cast<std::size_t>(D - 1), 3));
    CHECK(eq.c == doctest::Approx(1.0));
    for (const auto& s : eq.sigmas) CHECK((s - Vector::Ones(3)).norm() < 1e-12);
  }
}

TEST_CASE("two-layer deep linear singular values are square roots") {
  CounterRng rng(11, Stream::Test);
  Matrix V = gaussian(rng, 3, 3);
  Matrix sx = diag({1.0, 2.0, 0.5}), se = diag({0.3, 0.2, 0.6});
  auto pub = deep_linear_equilibrium(V, sx, se, 2, {4}, {}, DeepLinearNormalization::Published);
  CHECK((pub.sigmas[0] - pub.s_prime.cwiseSqrt()).norm() < 1e-12);
  CHECK((pub.sigmas[1] - pub.s_prime.cwiseSqrt()).norm() < 1e-12);
  auto tb = deep_linear_equilibrium(V, Matrix::Identity(3, 3), Matrix::Identity(3, 3), 2, {3});
  CHECK((tb.sigmas[0] - tb.s_prime.cwiseSqrt()).norm() < 1e-12);
  CHECK((tb.sigmas[1] - tb.s_prime.cwiseSqrt()).norm() < 1e-12);
}

TEST_CASE("deep linear layer norms follow the closed form") {
  CounterRng rng(12, Stream::Test);
  Matrix V = gaussian(rng, 3, 3);
  const int D = 4;
  auto eq = deep_linear_equilibrium(V, Matrix::Identity(3, 3), Matrix::Identity(3, 3), D, {3, 3, 3});
  Eigen::JacobiSVD<Matrix> svd(V);
  const double trS = svd.singularValues().sum();
  const double expect = std::pow(trS, 2.0 / D) * std::pow(3.0, 1.0 - 2.0 / D);
  REQUIRE(eq.layers.size() == 4);
  for (const auto& W : eq.layers) CHECK(W.squaredNorm() == doctest::Approx(expect).epsilon(1e-10));
  for (const auto& s : eq.sigmas) CHECK(s.squaredNorm() == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("deep linear construction reproduces the teacher and is stationary") {
  CounterRng rng(13, Stream::Test);
  Matrix V = gaussian(rng, 3, 4);
  Matrix sx = diag({1.0, 0.5, 2.0, 1.5}), se = diag({0.4, 0.2, 0.3});
  std::vector<Matrix> frames{orthonormal(rng, 5, 3), orthonormal(rng, 6, 3), orthonormal(rng, 5, 3)};
  for (const auto& fr : {std::vector<Matrix>{}, frames}) {
    auto eq = deep_linear_equilibrium(V, sx, se, 4, {5, 6, 5}, fr);
    Matrix prod = Matrix::Identity(4, 4);
    for (const auto& W : eq.layers) prod = (W * prod).eval();
    CHECK(relative_difference(prod, V) < 1e-10);
    for (double r : deep_linear_stationarity_residuals(eq.layers, sx, se)) CHECK(r < 1e-8);
    const double n2 = eq.layers[1].squaredNorm();
    CHECK(eq.layers[2].squaredNorm() == doctest::Approx(n2).epsilon(1e-12));
  }
  CHECK_THROWS_AS(deep_linear_equilibrium(V, sx, se, 3, {5, 2}), NumericalError);
  CHECK_THROWS_AS(deep_linear_equilibrium(V, sx, se, 3, {5}), ConfigError);
}

TEST_CASE("published normalization is stationary when traces equal the rank") {
  CounterRng rng(14, Stream::Test);
  Matrix V = gaussian(rng, 3, 3);
  auto eq = deep_linear_equilibrium(V, Matrix::Identity(3, 3), Matrix::Identity(3, 3), 4, {3, 3, 3}, {},
                                    DeepLinearNormalization::Published);
  for (double r : deep_linear_stationarity_residuals(eq.layers, Matrix::Identity(3, 3), Matrix::Identity(3, 3)))
    CHECK(r < 1e-8);
  Matrix sx = 2.0 * Matrix::Identity(3, 3);
  auto off = deep_linear_equilibrium(V, sx, Matrix::Identity(3, 3), 4, {3, 3, 3}, {},
                                     DeepLinearNormalization::Published);
  double worst = 0;
  for (double r : deep_linear_stationarity_residuals(off.layers, sx, Matrix::Identity(3, 3)))
    worst = std::max(worst, r);
  CHECK(worst > 1e-3);
}

TEST_CASE("deep linear construction cancels gradient noise along every rotation") {
  // At the constructed global minimum the residual is pure label noise, so the
  // per-sample gradient covariance must carry no net flow for any rotation
  // between adjacent layers.
  CounterRng rng(15, Stream::Test);
  Matrix V = gaussian(rng, 3, 3);
  std::vector<double> sx{1.0, 0.5, 2.0}, se{0.4, 0.2, 0.9};
  auto eq = deep_linear_equilibrium(V, diag(sx), diag(se), 3, {3, 3});
  DeepLinear model{{3, 3, 3, 3}};
  auto p = ParamBlocks::from_matrices({{"W1", eq.layers[0]}, {"W2", eq.layers[1]}, {"W3", eq.layers[2]}});
  auto data = generate_dataset(diagonal_data(V, sx, se, 100000, 16));
  Matrix G = per_sample_grads(model, p, data, 0.0);
  for (int i = 1; i < 3; ++i) {
    const std::string inner = "W" + std::to_string(i), outer = "W" + std::to_string(i + 1);
    const double scale = trace_sigma_A(G, SymmetryDescriptor(Scaling{{outer}}), p.layout());
    for (Index k = 0; k < 3; ++k)
      for (Index l = k; l < 3; ++l) {
        const double t = trace_sigma_A(G, SymmetryDescriptor(DoubleRotationBasis{outer, inner, k, l}), p.layout());
        CHECK(std::abs(t) < 0.05 * scale);
      }
  }
}

TEST_CASE("approximate symmetry deviation against an SGD simulation") {
  // Per-sample loss (a b x - y)^2 + (zeta h / 2) |theta - theta*|^2 with y = x + eps:
  // the first term is rescaling-invariant, the second pins theta* = (2, 0.5).
  const double a0 = 2.0, b0 = 0.5, zeta = 1.0, h = 1.0, eta = 0.01;
  BlockLayout layout({{"a", {1, 1}}, {"b", {1, 1}}});
  BoundSymmetry sym(SymmetryDescriptor(Rescaling{{"a"}, {"b"}}), layout);
  Vector theta_star(2);
  theta_star << a0, b0;
  // Gradient of the invariant term at theta* is -2 eps x (b, a); E[eps^2 x^2] = 1.
  Vector gdir(2);
  gdir << b0, a0;
  const Matrix sigma = 4.0 * gdir * gdir.transpose();
  Vector n = sym.apply(theta_star).normalized();
  auto dev = approx_symmetry_deviation(sym, sigma, eta / 2, zeta, h, n, theta_star);

  const int chains = 2000, steps = 15000, burn = 5000;
  CounterRng rng(99, Stream::Test);
  double sum = 0, sum2 = 0;
  for (int c = 0; c < chains; ++c) {
    double a = a0, b = b0, acc = 0;
    for (int t = 0; t < steps; ++t) {
      const double x = rng.normal(), y = x + rng.normal();
      const double r = a * b * x - y;
      const double ga = 2 * r * x * b + zeta * h * (a - a0);
      const double gb = 2 * r * x * a + zeta * h * (b - b0);
      a -= eta * ga;
      b -= eta * gb;
      if (t >= burn) acc += (a - a0) * n(0) + (b - b0) * n(1);
    }
    const double m = acc / (steps - burn);
    sum += m;
    sum2 += m * m;
  }
  const double mean = sum / chains;
  const double se = std::sqrt((sum2 / chains - mean * mean) / chains);
  CHECK(dev.s < 0);
  CHECK(std::abs(mean - dev.s) < 0.03 * std::abs(dev.s) + 3 * se);
  CHECK(dev.c_deviation == doctest::Approx(2.0 * (eta / 2) * sym.trace_with(sigma) / (zeta * h)));
}

TEST_CASE("approximate symmetry edge cases") {
  BlockLayout layout({{"a", {1, 1}}, {"b", {1, 1}}});
  BoundSymmetry sym(SymmetryDescriptor(Rescaling{{"a"}, {"b"}}), layout);
  Vector theta(2), n(2);
  theta << 1.0, 2.0;
  n << 1.0, 0.0;
  Matrix sigma = Matrix::Identity(2, 2) * 0.5;
  sigma(0, 0) = 2.0;
  CHECK(approx_symmetry_deviation(sym, sigma, 0.0, 1.0, 1.0, n, theta).s == 0.0);
  CHECK(approx_symmetry_deviation(sym, Matrix::Identity(2, 2), 0.1, 1.0, 1.0, n, theta).s == 0.0);
  n << 0.0, 0.0;
  CHECK_THROWS_AS(approx_symmetry_deviation(sym, sigma, 0.1, 1.0, 1.0, n, theta), NumericalError);
}
