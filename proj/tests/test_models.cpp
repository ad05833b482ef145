#include "noiselab/data.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/models.hpp"
#include "noiselab/symmetry.hpp"
#include "noiselab/verify.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>

using namespace noiselab;
using testutil::gaussian;

namespace {

// Central differences of per_sample_loss over every flat coordinate.
Vector fd_gradient(const ModelSpec& spec, const ParamBlocks& p, const Sample& s, double gamma, double h) {
  Vector g(p.dim());
  for (Index i = 0; i < p.dim(); ++i) {
    Vector a = p.flatten(), b = p.flatten();
    a(i) += h;
    b(i) -= h;
    g(i) = (per_sample_loss(spec, p.unflatten(a), s, gamma) - per_sample_loss(spec, p.unflatten(b), s, gamma)) /
           (2.0 * h);
  }
  return g;
}

double act(Activation a, double z, double alpha) {
  switch (a) {
    case Activation::Tanh: return std::tanh(z);
    case Activation::Relu: return z > 0 ? z : 0.0;
    case Activation::LeakyRelu: return z > 0 ? z : alpha * z;
    case Activation::Swish: return z / (1.0 + std::exp(-z));
  }
  return 0.0;
}

ParamBlocks random_params(const ModelSpec& spec, std::uint64_t seed) {
  InitSpec init;
  init.scheme = "kaiming";
  return initialize(spec, init, seed);
}

}  // namespace

TEST_CASE("deep linear prediction matches a chained loop evaluator") {
  DeepLinear spec{{4, 3, 5, 2}};
  auto p = random_params(spec, 17);
  CounterRng rng(4, Stream::Test);
  for (int s = 0; s < 5; ++s) {
    Vector x = testutil::gaussian_vec(rng, 4);
    std::vector<double> h(x.data(), x.data() + x.size());
    for (int layer = 1; layer <= 3; ++layer) {
      auto W = p.block("W" + std::to_string(layer));
      std::vector<double> next(W.rows(), 0.0);
      for (Index i = 0; i < W.rows(); ++i)
        for (Index j = 0; j < W.cols(); ++j) next[i] += W(i, j) * h[j];
      h = next;
    }
    Vector f = predict(spec, p, x);
    REQUIRE(f.size() == 2);
    for (Index i = 0; i < 2; ++i) CHECK(f(i) == doctest::Approx(h[i]).epsilon(1e-12));
  }
}

TEST_CASE("two-layer predictions by direct substitution") {
  CounterRng rng(8, Stream::Test);
  Vector x = testutil::gaussian_vec(rng, 3);
  SUBCASE("linear") {
    TwoLayerLinear spec{3, 4, 2};
    auto p = random_params(spec, 1);
    Matrix U = p.block("U"), W = p.block("W");
    CHECK((predict(spec, p, x) - U * (W * x)).norm() < 1e-12);
  }
  SUBCASE("nonlinear activations") {
    for (Activation a : {Activation::Tanh, Activation::Relu, Activation::LeakyRelu, Activation::Swish}) {
      TwoLayerNonlinear spec{3, 4, 2, a, 0.1};
      auto p = random_params(spec, 2);
      Matrix U = p.block("U"), W = p.block("W");
      Vector z = W * x;
      for (Index i = 0; i < z.size(); ++i) z(i) = act(a, z(i), 0.1);
      CHECK((predict(spec, p, x) - U * z).norm() < 1e-12);
    }
  }
  SUBCASE("normalized tanh variants") {
    for (ScaleVariant v : {ScaleVariant::A, ScaleVariant::B}) {
      ScaleInvariantNet spec{v, 3, 4, 2};
      auto p = random_params(spec, 3);
      Matrix u = p.block("u"), w = p.block("w");
      const double nu = u.norm(), nw = w.norm();
      Vector z = w * x / (v == ScaleVariant::A ? nu : nw);
      z = z.array().tanh().matrix();
      Vector f = u * z / (v == ScaleVariant::A ? nw : nu);
      CHECK((predict(spec, p, x) - f).norm() < 1e-12);
    }
  }
  SUBCASE("rank one") {
    Rank1Factorization spec{5};
    auto p = random_params(spec, 4);
    Vector x1(1);
    x1 << 0.7;
    CHECK(predict(spec, p, x1)(0) == doctest::Approx((p.block("U") * p.block("W"))(0, 0) * 0.7));
  }
}

TEST_CASE("loss is squared error plus weight decay") {
  TwoLayerLinear spec{2, 2, 1};
  Matrix U(1, 2), W(2, 2);
  U << 1, 2;
  W << 1, 0, 0, 1;
  auto p = ParamBlocks::from_matrices({{"U", U}, {"W", W}});
  Sample s{Vector::Ones(2), Vector::Constant(1, 1.0)};
  // f = 3, residual 2, |theta|^2 = 7
  CHECK(per_sample_loss(spec, p, s, 0.0) == doctest::Approx(4.0));
  CHECK(per_sample_loss(spec, p, s, 0.5) == doctest::Approx(7.5));
}

TEST_CASE("per-sample gradients match central differences on every toy model") {
  int pairs = 0;
  for (const auto& tc : toy_cases()) {
    CAPTURE(tc.name);
    auto data = generate_dataset(tc.data);
    for (std::uint64_t seed = 0; seed < 13; ++seed) {
      auto p = random_params(tc.model, 100 + seed);
      const double gamma = seed % 2 ? 0.05 : 0.0;
      Sample smp = data.sample(static_cast<Index>(seed));
      Vector g = per_sample_grad(tc.model, p, smp, gamma).flatten();
      Vector fd = fd_gradient(tc.model, p, smp, gamma, 1e-6);
      CHECK((g - fd).norm() / std::max(g.norm(), 1e-12) < 1e-6);
      CHECK(finite_difference_error(tc.model, p, smp, gamma) < 1e-5);
      ++pairs;
    }
  }
  CHECK(pairs >= 100);
}

TEST_CASE("per-sample gradients are tangent to the declared symmetries") {
  for (const auto& tc : toy_cases()) {
    CAPTURE(tc.name);
    auto data = generate_dataset(tc.data);
    auto p = random_params(tc.model, 12);
    for (const auto& desc : declared_symmetries(tc.model)) {
      BoundSymmetry sym(desc, p.layout());
      Vector At = sym.apply(p.flatten());
      for (Index s = 0; s < 8; ++s) {
        Vector g = per_sample_grad(tc.model, p, data.sample(s), 0.0).flatten();
        CHECK(std::abs(g.dot(At)) <= 1e-10 * std::max(g.norm() * At.norm(), 1e-12));
      }
    }
  }
}

TEST_CASE("mean gradient is the average of per-sample gradients") {
  for (const auto& tc : toy_cases()) {
    CAPTURE(tc.name);
    auto data = generate_dataset(tc.data);
    auto p = random_params(tc.model, 5);
    Matrix G = per_sample_grads(tc.model, p, data, 0.01);
    Vector mean = G.rowwise().mean();
    CHECK((mean_grad(tc.model, p, data, 0.01) - mean).norm() < 1e-10 * std::max(1.0, mean.norm()));
    double loss = 0;
    for (Index i = 0; i < data.size(); ++i) loss += per_sample_loss(tc.model, p, data.sample(i), 0.01);
    CHECK(mean_loss(tc.model, p, data, 0.01) == doctest::Approx(loss / data.size()).epsilon(1e-12));
    std::vector<Index> idx{3, 3, 9};
    Vector sub = (G.col(3) * 2 + G.col(9)) / 3.0;
    CHECK((mean_grad(tc.model, p, data, idx, 0.01) - sub).norm() < 1e-10 * std::max(1.0, sub.norm()));
  }
}

TEST_CASE("moment gradient equals the data gradient for linear families") {
  for (const auto& tc : toy_cases()) {
    CAPTURE(tc.name);
    auto data = generate_dataset(tc.data);
    auto p = random_params(tc.model, 9);
    if (!has_moment_gradient(tc.model)) {
      CHECK_THROWS_AS(mean_grad(tc.model, p, data_moments(data), 0.0), ConfigError);
      continue;
    }
    const auto moments = data_moments(data);
    CHECK(relative_difference(moments.xx, data.X() * data.X().transpose() / data.size()) < 1e-14);
    Vector a = mean_grad(tc.model, p, moments, 0.02);
    Vector b = mean_grad(tc.model, p, data, 0.02);
    CHECK((a - b).norm() < 1e-10 * b.norm());
  }
}

TEST_CASE("loss is invariant along declared symmetries") {
  for (const auto& tc : toy_cases()) {
    CAPTURE(tc.name);
    auto data = generate_dataset(tc.data);
    auto p = random_params(tc.model, 31);
    for (const auto& sym : declared_symmetries(tc.model)) {
      CAPTURE(sym.id());
      for (double lambda : {-2.0, -0.5, 0.3, 2.0}) {
        auto q = exp_map(sym, lambda, p);
        for (Index s = 0; s < 5; ++s) {
          const double a = per_sample_loss(tc.model, p, data.sample(s), 0.0);
          const double b = per_sample_loss(tc.model, q, data.sample(s), 0.0);
          CHECK(std::abs(a - b) <= 1e-10 * std::max(std::abs(a), 1e-12));
        }
      }
    }
  }
}

TEST_CASE("init variances per scheme") {
  TwoLayerLinear spec{10, 40, 3};
  auto layout = make_layout(spec);
  const auto& U = layout->at("U");
  const auto& W = layout->at("W");
  InitSpec init;
  init.scheme = "xavier";
  CHECK(init_variance(spec, init, U) == doctest::Approx(1.0 / 43));
  CHECK(init_variance(spec, init, W) == doctest::Approx(1.0 / 50));
  init.scheme = "kaiming";
  CHECK(init_variance(spec, init, U) == doctest::Approx(1.0 / 40));
  CHECK(init_variance(spec, init, W) == doctest::Approx(1.0 / 10));
  init.scheme = "kaiming-unit-output";
  CHECK(init_variance(spec, init, U) == doctest::Approx(1.0));
  CHECK(init_variance(spec, init, W) == doctest::Approx(1.0 / 10));
  init.scheme = "uniform-norm";
  init.scale = 0.3;
  CHECK(init_variance(spec, init, W) == doctest::Approx(0.09));
  init.scheme = "bogus";
  CHECK_THROWS_AS(init_variance(spec, init, W), ConfigError);
}

TEST_CASE("initialization is reproducible and has the requested spread") {
  TwoLayerLinear spec{50, 200, 50};
  InitSpec init;
  init.scheme = "xavier";
  auto a = initialize(spec, init, 4);
  auto b = initialize(spec, init, 4);
  auto c = initialize(spec, init, 5);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != c.flatten());
  const double var_w = a.squared_norm("W") / (200.0 * 50.0);
  CHECK(var_w == doctest::Approx(1.0 / 250).epsilon(0.05));

  init.layer_scales = {2.0, 1.0};
  auto d = initialize(spec, init, 4);
  CHECK(relative_difference(Matrix(d.block("U")), 2.0 * Matrix(a.block("U"))) < 1e-14);
  init.layer_scales = {1.0};
  CHECK_THROWS_AS(initialize(spec, init, 4), ConfigError);
}

TEST_CASE("invalid model shapes are rejected") {
  CHECK_THROWS_AS(validate(ModelSpec{TwoLayerLinear{0, 3, 1}}), ConfigError);
  CHECK_THROWS_AS(validate(ModelSpec{DeepLinear{{3}}}), ConfigError);
  CHECK(parse_activation("swish") == Activation::Swish);
  CHECK_THROWS_AS(parse_activation("gelu"), ConfigError);
}

TEST_CASE("layout block roles") {
  CHECK(output_block(TwoLayerLinear{2, 3, 1}) == "U");
  CHECK(input_block(TwoLayerLinear{2, 3, 1}) == "W");
  CHECK(output_block(DeepLinear{{2, 3, 3, 1}}) == "W3");
  CHECK(input_block(DeepLinear{{2, 3, 3, 1}}) == "W1");
  CHECK(make_layout(TwoLayerLinear{2, 3, 1})->blocks().front().name == "U");
}
