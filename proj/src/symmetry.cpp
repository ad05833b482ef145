#include "noiselab/symmetry.hpp"

#include "noiselab/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace noiselab {

double charge(const SymmetryDescriptor& desc, const ParamBlocks& params) {
  return BoundSymmetry(desc, params.layout()).charge(params.flatten());
}

ParamBlocks exp_map(const SymmetryDescriptor& desc, double lambda, const ParamBlocks& params) {
  BoundSymmetry sym(desc, params.layout());
  return ParamBlocks(params.layout_ptr(), sym.exp_map(lambda, params.flatten()));
}

double noether_flow_rate(const SymmetryDescriptor& desc, const NoiseStats& stats, const ParamBlocks& params,
                         double gamma, double sigma2) {
  BoundSymmetry sym(desc, params.layout());
  return -4.0 * gamma * sym.charge(params.flatten()) + sigma2 * trace_from_stats(stats, sym);
}

std::vector<SpectralTerm> spectral_terms(const BoundSymmetry& sym, const Vector& theta, const Matrix& grads) {
  if (grads.cols() < 1) throw ConfigError("spectral terms need at least one gradient");
  if (grads.rows() != sym.dim() || theta.size() != sym.dim()) {
    throw ConfigError("dimension mismatch between gradients, parameters and symmetry");
  }
  if (!grads.allFinite() || !theta.allFinite()) throw NumericalError("non-finite gradients or parameters");
  const Vector mean = grads.rowwise().mean();
  const Matrix centered = grads.colwise() - mean;
  const double n = static_cast<double>(grads.cols());
  std::vector<SpectralTerm> out;
  out.reserve(sym.modes().size());
  Eigen::RowVectorXd proj(grads.cols());
  for (const auto& m : sym.modes()) {
    proj.setZero();
    double th = 0.0;
    for (const auto& [i, c] : m.vec) {
      proj += c * centered.row(i);
      th += c * theta(i);
    }
    out.push_back({m.mu, proj.squaredNorm() / n, th * th});
  }
  return out;
}

ChargeFlowProfile::ChargeFlowProfile(const std::vector<SpectralTerm>& terms, double gamma, double sigma2) {
  if (!std::isfinite(gamma) || !std::isfinite(sigma2)) throw NumericalError("non-finite gamma or sigma2");
  double max_mu = 0.0;
  for (const auto& t : terms) {
    if (!std::isfinite(t.mu) || !std::isfinite(t.noise_var) || !std::isfinite(t.proj_sq)) {
      throw NumericalError("non-finite spectral term");
    }
    max_mu = std::max(max_mu, std::abs(t.mu));
  }
  const double cut = 1e-12 * max_mu;
  auto push = [](std::vector<Term>& v, double coef, double rate) {
    if (coef > 0.0) v.push_back({std::log(coef), rate});
  };
  for (const auto& t : terms) {
    const double r = std::abs(t.mu);
    if (r <= cut || r == 0.0) continue;
    max_rate_ = std::max(max_rate_, r);
    const double noise = sigma2 * r * t.noise_var;
    const double decay = 4.0 * gamma * r * t.proj_sq;
    if (t.mu > 0.0) {
      push(a_, noise, r);
      push(b_, decay, r);
    } else {
      push(a_, decay, r);
      push(b_, noise, r);
    }
  }
}

double ChargeFlowProfile::log_sum(const std::vector<Term>& terms, double lambda, double sign) {
  if (terms.empty()) return -std::numeric_limits<double>::infinity();
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& t : terms) mx = std::max(mx, t.log_coef + sign * 2.0 * lambda * t.rate);
  double s = 0.0;
  for (const auto& t : terms) s += std::exp(t.log_coef + sign * 2.0 * lambda * t.rate - mx);
  return mx + std::log(s);
}

double ChargeFlowProfile::decreasing_part(double lambda) const { return std::exp(log_sum(a_, lambda, -1.0)); }
double ChargeFlowProfile::increasing_part(double lambda) const { return std::exp(log_sum(b_, lambda, 1.0)); }
double ChargeFlowProfile::value(double lambda) const { return decreasing_part(lambda) - increasing_part(lambda); }

double ChargeFlowProfile::log_ratio(double lambda) const {
  return log_sum(a_, lambda, -1.0) - log_sum(b_, lambda, 1.0);
}

std::string lambda_status_name(LambdaStatus s) {
  switch (s) {
    case LambdaStatus::Root:
      return "root";
    case LambdaStatus::DegenerateEverywhereZero:
      return "degenerate-everywhere-zero";
    case LambdaStatus::Boundary:
      return "boundary";
    case LambdaStatus::Saturated:
      return "saturated";
  }
  return "root";
}

LambdaStar find_lambda_star(const ChargeFlowProfile& profile) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (profile.first_vanishes() && profile.second_vanishes()) return {0.0, LambdaStatus::DegenerateEverywhereZero};
  if (profile.second_vanishes()) return {inf, LambdaStatus::Boundary};
  if (profile.first_vanishes()) return {-inf, LambdaStatus::Boundary};

  const double limit = 700.0 / profile.max_rate();
  double lo = -std::min(1.0, limit);
  double hi = std::min(1.0, limit);
  int iterations = 0;
  while (profile.log_ratio(hi) > 0.0) {
    if (hi >= limit) return {inf, LambdaStatus::Saturated, iterations};
    lo = hi;
    hi = std::min(2.0 * hi, limit);
    ++iterations;
  }
  while (profile.log_ratio(lo) < 0.0) {
    if (lo <= -limit) return {-inf, LambdaStatus::Saturated, iterations};
    hi = lo;
    lo = std::max(2.0 * lo, -limit);
    ++iterations;
  }
  double mid = 0.5 * (lo + hi);
  double rel = 1.0;
  for (int it = 0; it < 400; ++it) {
    ++iterations;
    mid = 0.5 * (lo + hi);
    const double d = profile.log_ratio(mid);
    rel = std::abs(std::tanh(0.5 * d));
    if (rel <= 1e-12) break;
    if (d > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo <= 1e-12) {
      mid = 0.5 * (lo + hi);
      rel = std::abs(std::tanh(0.5 * profile.log_ratio(mid)));
      break;
    }
  }
  return {mid, LambdaStatus::Root, iterations, rel};
}

LambdaStar solve_lambda_star(const SymmetryDescriptor& desc, const ParamBlocks& params, const Matrix& grads,
                             double gamma, double sigma2) {
  BoundSymmetry sym(desc, params.layout());
  ChargeFlowProfile profile(spectral_terms(sym, params.flatten(), grads), gamma, sigma2);
  return find_lambda_star(profile);
}

namespace {
int sign_of(double v) { return (v > 0.0) - (v < 0.0); }
}  // namespace

FlowSignRecord flow_sign_check(const SymmetryDescriptor& desc, const ParamBlocks& params, const Matrix& grads,
                               double gamma, double sigma2) {
  BoundSymmetry sym(desc, params.layout());
  const Vector& theta = params.flatten();
  ChargeFlowProfile profile(spectral_terms(sym, theta, grads), gamma, sigma2);
  FlowSignRecord rec;
  rec.lambda_star = find_lambda_star(profile);
  rec.C = sym.charge(theta);
  rec.G = -4.0 * gamma * rec.C + sigma2 * trace_sigma_A(grads, sym);
  rec.sign_G = sign_of(rec.G);
  if (rec.lambda_star.status == LambdaStatus::DegenerateEverywhereZero) {
    rec.C_star = rec.C;
  } else if (std::isfinite(rec.lambda_star.lambda)) {
    rec.C_star = sym.charge(sym.exp_map(rec.lambda_star.lambda, theta));
  }
  if (rec.C_star) {
    const double diff = rec.C - *rec.C_star;
    const double scale = std::max(std::abs(rec.C), std::abs(*rec.C_star));
    rec.sign_C_minus_C_star = std::abs(diff) <= 1e-12 * scale ? 0 : sign_of(diff);
  }
  if (rec.sign_G != 0 && rec.sign_C_minus_C_star != 0) rec.consistent = rec.sign_G == -rec.sign_C_minus_C_star;
  return rec;
}

bool ChargeSeries::aligned() const {
  const std::size_t n = steps.size();
  if (time.size() != n || C.size() != n || G.size() != n || dCdt.size() != n || lambda_star.size() != n ||
      rel_dist.size() != n) {
    return false;
  }
  for (std::size_t i = 1; i < n; ++i) {
    if (steps[i] <= steps[i - 1] || time[i] <= time[i - 1]) return false;
  }
  return true;
}

std::vector<SymmetryDescriptor> declared_symmetries(const ModelSpec& spec) {
  std::vector<SymmetryDescriptor> out;
  if (auto* m = std::get_if<TwoLayerLinear>(&spec)) {
    out.emplace_back(Rescaling{{"U"}, {"W"}});
    out.emplace_back(DoubleRotationBasis{"U", "W", 0, 0});
    if (m->d > 1) out.emplace_back(DoubleRotationBasis{"U", "W", 0, 1});
  } else if (auto* m = std::get_if<Rank1Factorization>(&spec)) {
    out.emplace_back(Rescaling{{"U"}, {"W"}});
    for (Index k = 0; k < m->d; ++k)
      for (Index l = k; l < m->d; ++l) out.emplace_back(DoubleRotationBasis{"U", "W", k, l});
  } else if (auto* m = std::get_if<DeepLinear>(&spec)) {
    for (std::size_t i = 1; i + 1 < m->dims.size(); ++i) {
      const std::string lower = "W" + std::to_string(i);
      const std::string upper = "W" + std::to_string(i + 1);
      out.emplace_back(Rescaling{{upper}, {lower}});
      out.emplace_back(DoubleRotationBasis{upper, lower, 0, m->dims[i] > 1 ? 1 : 0});
    }
  } else if (auto* m = std::get_if<TwoLayerNonlinear>(&spec)) {
    if (m->activation == Activation::Relu || m->activation == Activation::LeakyRelu) {
      out.emplace_back(Rescaling{{"U"}, {"W"}});
    }
  } else if (auto* m = std::get_if<ScaleInvariantNet>(&spec)) {
    if (m->variant == ScaleVariant::B) {
      out.emplace_back(Scaling{{"u"}});
      out.emplace_back(Scaling{{"w"}});
    }
    out.emplace_back(Scaling{{"u", "w"}});
  }
  return out;
}

}  // namespace noiselab
