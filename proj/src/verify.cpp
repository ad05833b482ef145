#include "noiselab/verify.hpp"

#include "noiselab/equilibria.hpp"
#include "noiselab/errors.hpp"
#include "noiselab/noise.hpp"
#include "noiselab/rng.hpp"
#include "noiselab/symmetry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace noiselab {

namespace {

DataSpec toy_data(Index d_x, Index d_y, Index n, std::uint64_t seed) {
  DataSpec d;
  d.d_x = d_x;
  d.n = n;
  d.seed = seed;
  d.teacher.kind = TeacherSpec::Kind::Random;
  d.teacher.d_y = d_y;
  d.noise.variance = 0.25;
  return d;
}

Matrix random_matrix(CounterRng& rng, Index r, Index c, double scale = 1.0) {
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

VerifyCheck make(const std::string& suite, const std::string& name, double measured, double tol,
                 std::string notes = "") {
  return {suite, name, measured, tol, measured <= tol, std::move(notes)};
}

std::vector<VerifyCheck> suite_charge_identity(std::uint64_t seed) {
  std::vector<VerifyCheck> out;
  for (const auto& tc : toy_cases()) {
    for (const auto& sym : declared_symmetries(tc.model)) {
      for (Algorithm algo : {Algorithm::SGD, Algorithm::GD}) {
        RunSpec spec;
        spec.run_id = tc.name;
        spec.model = tc.model;
        spec.data = tc.data;
        spec.optim.algorithm = algo;
        spec.optim.lr = 0.01;
        spec.optim.batch_size = 4;
        spec.optim.steps = 1000;
        spec.optim.seed = seed;
        spec.optim.diagnostics.cadence = 1000;
        spec.optim.diagnostics.noise = false;
        const auto r = charge_identity_worst(spec, sym);
        out.push_back(make("charge-identity", tc.name + "/" + sym.id() + "/" + algorithm_name(algo), r.worst, 1e-10,
                           std::to_string(r.steps) + " steps"));
      }
    }
  }
  return out;
}

std::vector<VerifyCheck> suite_lemma_transport(std::uint64_t seed) {
  std::vector<VerifyCheck> out;
  for (const auto& tc : toy_cases()) {
    if (!std::holds_alternative<TwoLayerLinear>(tc.model) && !std::holds_alternative<DeepLinear>(tc.model) &&
        !std::holds_alternative<ScaleInvariantNet>(tc.model)) {
      continue;
    }
    InitSpec init;
    const ParamBlocks theta = initialize(tc.model, init, seed + 11);
    const Dataset data = generate_dataset(tc.data);
    for (const auto& sym : declared_symmetries(tc.model)) {
      for (double lambda : {-1.0, -0.1, 0.1, 1.0}) {
        std::ostringstream name;
        name << tc.name << "/" << sym.id() << "/lambda=" << lambda;
        out.push_back(make("lemma-transport", name.str(),
                           covariance_transport_error(tc.model, theta, data, sym, lambda), 1e-8));
      }
    }
  }
  return out;
}

std::vector<VerifyCheck> suite_lambda_oracle(std::uint64_t seed) {
  std::vector<VerifyCheck> out;
  CounterRng rng(seed, Stream::Test, 0);
  int done = 0, skipped = 0;
  double worst = 0.0;
  int bad_monotone = 0, bad_single = 0;
  while (done < 100) {
    const int modes = 2 + static_cast<int>(rng.below(5));
    std::vector<SpectralTerm> terms;
    for (int i = 0; i < modes; ++i) {
      SpectralTerm t;
      const double mag = 0.2 + 1.8 * rng.uniform();
      t.mu = (i == 0 || (i > 1 && rng.uniform() < 0.5)) ? mag : -mag;
      t.noise_var = 0.05 + 2.0 * rng.uniform();
      t.proj_sq = 0.05 + 2.0 * rng.uniform();
      terms.push_back(t);
    }
    const double gamma = 0.01 + rng.uniform();
    const double sigma2 = 0.01 + rng.uniform();
    const GridRoot g = grid_scan_root(terms, gamma, sigma2, -20.0, 20.0, 1000000);
    if (!g.found) {
      ++skipped;
      continue;
    }
    ++done;
    const LambdaStar ls = find_lambda_star(ChargeFlowProfile(terms, gamma, sigma2));
    const double diff = ls.status == LambdaStatus::Root ? std::abs(ls.lambda - g.lambda) : 1e300;
    worst = std::max(worst, diff);
    bad_monotone += !g.non_increasing;
    bad_single += g.sign_changes != 1;
  }
  out.push_back(make("lambda-oracle", "bisection vs 1e6-point grid", worst, 1e-4,
                     "100 instances, " + std::to_string(skipped) + " redrawn without a root in [-20, 20]"));
  out.push_back(make("lambda-oracle", "flow non-increasing on grid", bad_monotone, 0));
  out.push_back(make("lambda-oracle", "single sign change on grid", bad_single, 0));
  return out;
}

std::vector<VerifyCheck> suite_deep_linear(std::uint64_t seed) {
  std::vector<VerifyCheck> out;
  CounterRng rng(seed, Stream::Test, 1u << 20);
  double worst_stat = 0.0, worst_prod = 0.0, worst_frame = 0.0;
  int instances = 0;
  for (int D = 2; D <= 5; ++D) {
    for (int rep = 0; rep < 5; ++rep) {
      const Index dx = 2 + static_cast<Index>(rng.below(4));
      const Index dy = 2 + static_cast<Index>(rng.below(4));
      const Matrix V = random_matrix(rng, dy, dx);
      Vector sx(dx), se(dy);
      for (Index i = 0; i < dx; ++i) sx(i) = 0.2 + 2.0 * rng.uniform();
      for (Index i = 0; i < dy; ++i) se(i) = 0.2 + 2.0 * rng.uniform();
      const Matrix Sx = sx.asDiagonal();
      const Matrix Se = se.asDiagonal();
      std::vector<Index> widths(static_cast<std::size_t>(D - 1), std::max(dx, dy) + 1);
      const auto eq = deep_linear_equilibrium(V, Sx, Se, D, widths);
      Matrix prod = eq.layers.front();
      for (std::size_t i = 1; i < eq.layers.size(); ++i) prod = eq.layers[i] * prod;
      worst_prod = std::max(worst_prod, relative_difference(prod, V));
      for (const auto& f : eq.frames) {
        worst_frame = std::max(worst_frame, (f.transpose() * f - Matrix::Identity(f.cols(), f.cols())).norm());
      }
      for (double r : deep_linear_stationarity_residuals(eq.layers, Sx, Se)) worst_stat = std::max(worst_stat, r);
      ++instances;
    }
  }
  const std::string n = std::to_string(instances) + " random instances, D = 2..5";
  out.push_back(make("deep-linear-stationarity", "pairwise stationarity residual", worst_stat, 1e-8, n));
  out.push_back(make("deep-linear-stationarity", "product equals teacher", worst_prod, 1e-8, n));
  out.push_back(make("deep-linear-stationarity", "frames orthonormal", worst_frame, 1e-10, n));
  return out;
}

std::vector<VerifyCheck> suite_gradient_check(std::uint64_t seed) {
  std::vector<VerifyCheck> out;
  for (const auto& tc : toy_cases()) {
    const Dataset data = generate_dataset(tc.data);
    double worst = 0.0;
    for (int k = 0; k < 100; ++k) {
      InitSpec init;
      init.scheme = "uniform-norm";
      init.scale = 0.8;
      const ParamBlocks p = initialize(tc.model, init, seed * 1000 + static_cast<std::uint64_t>(k));
      const double gamma = k % 2 ? 0.05 : 0.0;
      worst = std::max(worst, finite_difference_error(tc.model, p, data.sample(k % data.size()), gamma));
    }
    out.push_back(make("gradient-check", tc.name, worst, 1e-5, "100 (params, sample) pairs"));
  }
  return out;
}

}  // namespace

std::vector<ToyCase> toy_cases() {
  std::vector<ToyCase> out;
  out.push_back({"two_layer_linear", TwoLayerLinear{3, 4, 2}, toy_data(3, 2, 32, 101)});
  out.push_back({"deep_linear", DeepLinear{{3, 4, 4, 2}}, toy_data(3, 2, 32, 102)});
  out.push_back({"nonlinear_tanh", TwoLayerNonlinear{3, 4, 2, Activation::Tanh, 0.01}, toy_data(3, 2, 32, 103)});
  out.push_back({"nonlinear_relu", TwoLayerNonlinear{3, 4, 2, Activation::Relu, 0.01}, toy_data(3, 2, 32, 104)});
  out.push_back(
      {"nonlinear_leaky_relu", TwoLayerNonlinear{3, 4, 2, Activation::LeakyRelu, 0.1}, toy_data(3, 2, 32, 105)});
  out.push_back({"nonlinear_swish", TwoLayerNonlinear{3, 4, 2, Activation::Swish, 0.01}, toy_data(3, 2, 32, 106)});
  out.push_back({"scale_invariant_A", ScaleInvariantNet{ScaleVariant::A, 3, 4, 2}, toy_data(3, 2, 32, 107)});
  out.push_back({"scale_invariant_B", ScaleInvariantNet{ScaleVariant::B, 3, 4, 2}, toy_data(3, 2, 32, 108)});
  out.push_back({"rank1", Rank1Factorization{5}, toy_data(1, 1, 32, 109)});
  return out;
}

ChargeIdentityResult charge_identity_worst(const RunSpec& spec, const SymmetryDescriptor& desc) {
  const Dataset data = materialize_dataset(spec);
  const ParamBlocks init = initialize(spec.model, spec.init, spec.optim.seed);
  const BoundSymmetry sym(desc, init.layout());
  ChargeIdentityResult res;
  RunSpec quiet = spec;
  quiet.symmetries.clear();
  run(quiet, data, init, [&](Index, const ParamBlocks& before, const Vector& g, const ParamBlocks& after, double lr) {
    const double c0 = sym.charge(before.flatten());
    const double c1 = sym.charge(after.flatten());
    const double pred = lr * lr * sym.quadratic(g, g);
    const double scale = std::abs(c0) + lr * lr * g.squaredNorm();
    const double v = std::abs((c1 - c0) - pred) / std::max(scale, 1e-300);
    res.worst = std::max(res.worst, v);
    ++res.steps;
  });
  return res;
}

double gd_charge_drift(const RunSpec& spec, const SymmetryDescriptor& desc) {
  const Dataset data = materialize_dataset(spec);
  const ParamBlocks init = initialize(spec.model, spec.init, spec.optim.seed);
  RunSpec quiet = spec;
  quiet.symmetries.clear();
  quiet.optim.algorithm = Algorithm::GD;
  const RunRecord rec = run(quiet, data, init);
  const BoundSymmetry sym(desc, init.layout());
  return std::abs(sym.charge(rec.terminal.flatten()) - sym.charge(init.flatten()));
}

double covariance_transport_error(const ModelSpec& model, const ParamBlocks& theta, const Dataset& data,
                                  const SymmetryDescriptor& desc, double lambda) {
  const BoundSymmetry sym(desc, theta.layout());
  const Matrix A = sym.dense();
  Eigen::SelfAdjointEigenSolver<Matrix> es(A);
  const Matrix decay =
      es.eigenvectors() * (-2.0 * lambda * es.eigenvalues()).array().exp().matrix().asDiagonal() *
      es.eigenvectors().transpose();
  const Matrix sigma0 = estimate_full_covariance(per_sample_grads(model, theta, data, 0.0)).sigma;
  const Vector moved = es.eigenvectors() * (lambda * es.eigenvalues()).array().exp().matrix().asDiagonal() *
                       es.eigenvectors().transpose() * theta.flatten();
  const Matrix sigma1 = estimate_full_covariance(per_sample_grads(model, theta.unflatten(moved), data, 0.0)).sigma;
  const double lhs = (sigma1 * A).trace();
  const double rhs = (decay * sigma0 * A).trace();
  const double scale = std::max({std::abs(lhs), std::abs(rhs), 1e-12 * sigma0.norm() * A.norm()});
  return std::abs(lhs - rhs) / std::max(scale, 1e-300);
}

double finite_difference_error(const ModelSpec& model, const ParamBlocks& params, const Sample& sample, double gamma,
                               double h) {
  const Vector g = per_sample_grad(model, params, sample, gamma).flatten();
  Vector fd(g.size());
  Vector theta = params.flatten();
  for (Index i = 0; i < theta.size(); ++i) {
    const double old = theta(i);
    theta(i) = old + h;
    const double fp = per_sample_loss(model, params.unflatten(theta), sample, gamma);
    theta(i) = old - h;
    const double fm = per_sample_loss(model, params.unflatten(theta), sample, gamma);
    theta(i) = old;
    fd(i) = (fp - fm) / (2.0 * h);
  }
  const double scale = std::max({g.norm(), fd.norm(), 1e-8});
  return (g - fd).norm() / scale;
}

GridRoot grid_scan_root(const std::vector<SpectralTerm>& terms, double gamma, double sigma2, double lo, double hi,
                        Index points) {
  const double step = (hi - lo) / static_cast<double>(points - 1);
  const std::size_t m = terms.size();
  // Exponentials advance by a fixed factor per grid step and are recomputed exactly every 1024 points.
  std::vector<double> down(m), up(m), down_step(m), up_step(m);
  for (std::size_t k = 0; k < m; ++k) {
    down_step[k] = std::exp(-2.0 * step * terms[k].mu);
    up_step[k] = std::exp(2.0 * step * terms[k].mu);
  }
  auto flow_at = [&](Index i) {
    if (i % 1024 == 0) {
      const double x = lo + step * static_cast<double>(i);
      for (std::size_t k = 0; k < m; ++k) {
        down[k] = std::exp(-2.0 * x * terms[k].mu);
        up[k] = std::exp(2.0 * x * terms[k].mu);
      }
    } else {
      for (std::size_t k = 0; k < m; ++k) {
        down[k] *= down_step[k];
        up[k] *= up_step[k];
      }
    }
    double v = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      v += sigma2 * terms[k].mu * down[k] * terms[k].noise_var;
      v -= 4.0 * gamma * terms[k].mu * up[k] * terms[k].proj_sq;
    }
    return v;
  };
  GridRoot out;
  double prev = flow_at(0);
  double prev_x = lo;
  for (Index i = 1; i < points; ++i) {
    const double x = lo + step * static_cast<double>(i);
    const double v = flow_at(i);
    if (v > prev + 1e-9 * std::max(std::abs(prev), std::abs(v))) out.non_increasing = false;
    if ((prev > 0 && v <= 0) || (prev >= 0 && v < 0)) {
      ++out.sign_changes;
      if (!out.found) {
        out.found = true;
        out.lambda = 0.5 * (prev_x + x);
      }
    }
    prev = v;
    prev_x = x;
  }
  return out;
}

std::vector<std::string> verify_suites() {
  return {"charge-identity", "lemma-transport", "lambda-oracle", "deep-linear-stationarity", "gradient-check"};
}

bool is_verify_suite(const std::string& name) {
  const auto s = verify_suites();
  return name == "all" || std::find(s.begin(), s.end(), name) != s.end();
}

std::vector<VerifyCheck> run_verify_suite(const std::string& name, std::uint64_t seed) {
  if (name == "all") {
    std::vector<VerifyCheck> out;
    for (const auto& s : verify_suites()) {
      auto part = run_verify_suite(s, seed);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  if (name == "charge-identity") return suite_charge_identity(seed);
  if (name == "lemma-transport") return suite_lemma_transport(seed);
  if (name == "lambda-oracle") return suite_lambda_oracle(seed);
  if (name == "deep-linear-stationarity") return suite_deep_linear(seed);
  if (name == "gradient-check") return suite_gradient_check(seed);
  throw ConfigError("unknown verify suite '" + name + "'");
}

}  // namespace noiselab
