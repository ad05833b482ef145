#include "noiselab/data.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/models.hpp"
#include "noiselab/noise.hpp"
#include "noiselab/symmetry.hpp"
#include "noiselab/verify.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <cmath>

using namespace noiselab;
using testutil::gaussian;

namespace {

Matrix sym_expm(const Matrix& A, double t) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(A);
  return es.eigenvectors() * (t * es.eigenvalues()).array().exp().matrix().asDiagonal() *
         es.eigenvectors().transpose();
}

// Generator of the (k, l) rotation for U (dy x d) then W (d x dx), column-major.
Matrix rotation_generator(Index dy, Index d, Index dx, Index k, Index l) {
  const Index P = dy * d + d * dx;
  Matrix A = Matrix::Zero(P, P);
  const double w = k == l ? 1.0 : 0.5;
  for (Index i = 0; i < dy; ++i) {
    A(k * dy + i, l * dy + i) += w;
    if (k != l) A(l * dy + i, k * dy + i) += w;
  }
  const Index off = dy * d;
  for (Index j = 0; j < dx; ++j) {
    A(off + j * d + k, off + j * d + l) -= w;
    if (k != l) A(off + j * d + l, off + j * d + k) -= w;
  }
  return A;
}

// I(lambda) summed term by term.
double flow_profile(const std::vector<SpectralTerm>& terms, double gamma, double sigma2, double lambda) {
  double v = 0;
  for (const auto& t : terms)
    v += t.mu * (sigma2 * t.noise_var * std::exp(-2 * lambda * t.mu) - 4 * gamma * t.proj_sq * std::exp(2 * lambda * t.mu));
  return v;
}

struct Setup {
  TwoLayerLinear model{3, 4, 2};
  Dataset data;
  ParamBlocks p;
  Setup() : data(generate_dataset(toy_cases().front().data)), p(initialize(model, InitSpec{}, 6)) {}
};

}  // namespace

TEST_CASE("rotation charge matches a hand-assembled quadratic form") {
  Setup s;
  const Vector theta = s.p.flatten();
  Matrix U = s.p.block("U"), W = s.p.block("W");
  for (auto [k, l] : std::vector<std::pair<Index, Index>>{{0, 0}, {0, 1}, {3, 1}}) {
    SymmetryDescriptor desc(DoubleRotationBasis{"U", "W", k, l});
    Matrix A = rotation_generator(2, 4, 3, k, l);
    BoundSymmetry sym(desc, s.p.layout());
    CHECK(relative_difference(sym.dense(), A) < 1e-15);
    const double direct = U.col(k).dot(U.col(l)) - W.row(k).dot(W.row(l));
    CHECK(charge(desc, s.p) == doctest::Approx(theta.dot(A * theta)).epsilon(1e-12));
    CHECK(charge(desc, s.p) == doctest::Approx(direct).epsilon(1e-12));
  }
}

TEST_CASE("rescaling and scaling charges") {
  Setup s;
  CHECK(charge(SymmetryDescriptor(Rescaling{{"U"}, {"W"}}), s.p) ==
        doctest::Approx(s.p.squared_norm("U") - s.p.squared_norm("W")));
  CHECK(charge(SymmetryDescriptor(Scaling{{"U", "W"}}), s.p) == doctest::Approx(s.p.squared_norm()));
}

TEST_CASE("exp_map equals the matrix exponential of the generator") {
  for (const auto& tc : toy_cases()) {
    CAPTURE(tc.name);
    auto p = initialize(tc.model, InitSpec{}, 4);
    for (const auto& desc : declared_symmetries(tc.model)) {
      BoundSymmetry sym(desc, p.layout());
      const Matrix A = sym.dense();
      for (double lambda : {-1.5, 0.2, 1.0}) {
        Vector expect = sym_expm(A, lambda) * p.flatten();
        CHECK((exp_map(desc, lambda, p).flatten() - expect).norm() < 1e-12 * expect.norm());
      }
    }
  }
}

TEST_CASE("exp_map is a one-parameter group") {
  Setup s;
  for (const auto& desc : declared_symmetries(s.model)) {
    CHECK(exp_map(desc, 0.0, s.p).flatten() == s.p.flatten());
    Vector ab = exp_map(desc, 0.4, exp_map(desc, -1.1, s.p)).flatten();
    Vector sum = exp_map(desc, -0.7, s.p).flatten();
    CHECK((ab - sum).norm() < 1e-12 * sum.norm());
  }
}

TEST_CASE("charge grows along exp_map as the eigen-expansion predicts") {
  Setup s;
  SymmetryDescriptor desc(Rescaling{{"U"}, {"W"}});
  const double lambda = 0.3;
  const double expect =
      std::exp(2 * lambda) * s.p.squared_norm("U") - std::exp(-2 * lambda) * s.p.squared_norm("W");
  CHECK(charge(desc, exp_map(desc, lambda, s.p)) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("generic dense generator") {
  Setup s;
  CounterRng rng(3, Stream::Test);
  Matrix B = gaussian(rng, 6, 6);
  Matrix A = 0.5 * (B + B.transpose());
  SymmetryDescriptor desc(GenericDense{{"U"}, A});
  Vector u = s.p.flatten().head(8);
  CHECK_THROWS_AS(BoundSymmetry(desc, s.p.layout()), ConfigError);

  Matrix A8 = Matrix::Zero(8, 8);
  A8.topLeftCorner(6, 6) = A;
  SymmetryDescriptor d8(GenericDense{{"U"}, A8});
  CHECK(charge(d8, s.p) == doctest::Approx(u.dot(A8 * u)).epsilon(1e-12));
  Vector moved = exp_map(d8, 0.3, s.p).flatten();
  CHECK((moved.head(8) - sym_expm(A8, 0.3) * u).norm() < 1e-12 * u.norm());
  CHECK(moved.tail(12) == s.p.flatten().tail(12));

  Matrix asym = A8;
  asym(0, 1) += 1.0;
  CHECK_THROWS_AS(SymmetryDescriptor(GenericDense{{"U"}, asym}), ConfigError);
}

TEST_CASE("descriptor validation") {
  Setup s;
  CHECK_THROWS_AS(BoundSymmetry(SymmetryDescriptor(DoubleRotationBasis{"U", "U", 0, 1}), s.p.layout()), ConfigError);
  CHECK_THROWS_AS(BoundSymmetry(SymmetryDescriptor(DoubleRotationBasis{"U", "W", 0, 4}), s.p.layout()), ConfigError);
  CHECK_THROWS_AS(BoundSymmetry(SymmetryDescriptor(Rescaling{{"U"}, {"X"}}), s.p.layout()), ConfigError);
  CHECK_THROWS_AS(BoundSymmetry(SymmetryDescriptor(Rescaling{{"U"}, {"U"}}), s.p.layout()), ConfigError);
  CHECK(SymmetryDescriptor(Rescaling{{"U"}, {"W"}}).id() == "rescale(U|W)");
  CHECK(SymmetryDescriptor(Scaling{{"u"}}, "mine").id() == "mine");
}

TEST_CASE("declared symmetries per family") {
  CHECK(declared_symmetries(TwoLayerLinear{3, 4, 2}).size() == 3);
  CHECK(declared_symmetries(Rank1Factorization{3}).size() == 7);
  CHECK(declared_symmetries(DeepLinear{{3, 4, 4, 4, 2}}).size() == 6);
  CHECK(declared_symmetries(TwoLayerNonlinear{3, 4, 2, Activation::Tanh, 0.01}).empty());
  CHECK(declared_symmetries(TwoLayerNonlinear{3, 4, 2, Activation::LeakyRelu, 0.01}).size() == 1);
  CHECK(declared_symmetries(ScaleInvariantNet{ScaleVariant::A, 3, 4, 2}).size() == 1);
  CHECK(declared_symmetries(ScaleInvariantNet{ScaleVariant::B, 3, 4, 2}).size() == 3);
}

TEST_CASE("flow rate from dense oracles") {
  Setup s;
  Matrix G = per_sample_grads(s.model, s.p, s.data, 0.0);
  auto stats = estimate_full_covariance(G);
  for (const auto& desc : declared_symmetries(s.model)) {
    BoundSymmetry sym(desc, s.p.layout());
    const Matrix A = sym.dense();
    const Vector th = s.p.flatten();
    const double gamma = 0.03, sigma2 = 0.02;
    const double expect = -4 * gamma * th.dot(A * th) + sigma2 * (stats.sigma * A).trace();
    CHECK(noether_flow_rate(desc, stats, s.p, gamma, sigma2) ==
          doctest::Approx(expect).epsilon(1e-10).scale(std::abs(th.dot(A * th))));
  }
}

TEST_CASE("flow profile matches the charge flow along the orbit") {
  Setup s;
  Matrix G = per_sample_grads(s.model, s.p, s.data, 0.0);
  const double gamma = 0.01, sigma2 = 0.05;
  for (const auto& desc : declared_symmetries(s.model)) {
    BoundSymmetry sym(desc, s.p.layout());
    auto terms = spectral_terms(sym, s.p.flatten(), G);
    ChargeFlowProfile prof(terms, gamma, sigma2);
    for (double lambda : {-0.8, 0.0, 0.6}) {
      auto q = exp_map(desc, lambda, s.p);
      Matrix Gq = per_sample_grads(s.model, q, s.data, 0.0);
      const double direct = -4 * gamma * sym.charge(q.flatten()) + sigma2 * trace_sigma_A(Gq, sym);
      const double scale = prof.decreasing_part(lambda) + prof.increasing_part(lambda);
      CHECK(std::abs(prof.value(lambda) - direct) <= 1e-9 * scale);
      CHECK(std::abs(flow_profile(terms, gamma, sigma2, lambda) - direct) <= 1e-9 * scale);
    }
  }
}

TEST_CASE("two-mode flow root has a closed form") {
  // I = e^{-2l}(s2 n1 + 4g t2) - e^{2l}(4g t1 + s2 n2)  =>  l* = log(ratio) / 4
  std::vector<SpectralTerm> terms{{1.0, 2.0, 1.0}, {-1.0, 0.5, 3.0}};
  auto ls = find_lambda_star(ChargeFlowProfile(terms, 0.01, 0.05));
  CHECK(ls.status == LambdaStatus::Root);
  CHECK(ls.lambda == doctest::Approx(0.3048100691141811).epsilon(1e-10));
  CHECK(ls.relative_residual <= 1e-12);
}

TEST_CASE("three-mode flow root against a fine grid") {
  std::vector<SpectralTerm> terms{{2.0, 1.0, 0.5}, {-1.0, 0.3, 2.0}, {0.5, 2.0, 1.0}};
  const double gamma = 0.02, sigma2 = 0.1;
  auto ls = find_lambda_star(ChargeFlowProfile(terms, gamma, sigma2));
  CHECK(ls.lambda == doctest::Approx(0.20486084797077142).epsilon(1e-10));

  const Index points = 1000001;
  double prev = flow_profile(terms, gamma, sigma2, -20.0), root = 0;
  int changes = 0;
  bool monotone = true;
  for (Index i = 1; i < points; ++i) {
    const double x = -20.0 + 40.0 * i / (points - 1);
    const double v = flow_profile(terms, gamma, sigma2, x);
    if ((prev > 0) != (v > 0)) {
      ++changes;
      root = x;
    }
    monotone = monotone && v <= prev;
    prev = v;
  }
  CHECK(monotone);
  CHECK(changes == 1);
  CHECK(std::abs(root - ls.lambda) <= 1e-4);
  auto grid = grid_scan_root(terms, gamma, sigma2, -20, 20, points);
  CHECK(grid.found);
  CHECK(grid.sign_changes == 1);
  CHECK(std::abs(grid.lambda - ls.lambda) <= 1e-4);
}

TEST_CASE("degenerate and one-sided flow profiles") {
  CHECK(find_lambda_star(ChargeFlowProfile({}, 0.1, 0.1)).status == LambdaStatus::DegenerateEverywhereZero);
  // Noise only on a growing mode: the charge grows without bound.
  auto up = find_lambda_star(ChargeFlowProfile({{1.0, 1.0, 0.0}}, 0.0, 0.1));
  CHECK(up.status == LambdaStatus::Boundary);
  CHECK(up.lambda == std::numeric_limits<double>::infinity());
  auto down = find_lambda_star(ChargeFlowProfile({{1.0, 0.0, 1.0}}, 0.1, 0.1));
  CHECK(down.lambda == -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(ChargeFlowProfile({{1.0, NAN, 1.0}}, 0.1, 0.1), NumericalError);
}

TEST_CASE("flow sign opposes the distance to the equilibrium charge") {
  Setup s;
  Matrix G0 = per_sample_grads(s.model, s.p, s.data, 0.0);
  const double gamma = 0.01, sigma2 = 0.05;
  for (const auto& desc : declared_symmetries(s.model)) {
    CAPTURE(desc.id());
    auto ls = solve_lambda_star(desc, s.p, G0, gamma, sigma2);
    REQUIRE(ls.status == LambdaStatus::Root);
    auto eq = exp_map(desc, ls.lambda, s.p);
    auto at_eq = flow_sign_check(desc, eq, per_sample_grads(s.model, eq, s.data, 0.0), gamma, sigma2);
    CHECK(std::abs(at_eq.lambda_star.lambda) < 1e-6);

    auto plus = exp_map(desc, 0.5, eq);
    auto rp = flow_sign_check(desc, plus, per_sample_grads(s.model, plus, s.data, 0.0), gamma, sigma2);
    CHECK(rp.sign_G < 0);
    CHECK(rp.sign_C_minus_C_star > 0);
    CHECK(rp.consistent);

    auto minus = exp_map(desc, -0.5, eq);
    auto rm = flow_sign_check(desc, minus, per_sample_grads(s.model, minus, s.data, 0.0), gamma, sigma2);
    CHECK(rm.sign_G > 0);
    CHECK(rm.sign_C_minus_C_star < 0);
    CHECK(rm.consistent);
    CHECK(*rp.C_star == doctest::Approx(*rm.C_star).epsilon(1e-8));
  }
}
