#include "noiselab/descriptor.hpp"

#include "noiselab/errors.hpp"

#include <cmath>
#include <set>

namespace noiselab {

namespace {

std::string join(const std::vector<std::string>& names, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out += sep;
    out += names[i];
  }
  return out;
}

std::vector<Index> block_coords(const BlockLayout& layout, const std::string& name) {
  const auto& b = layout.at(name);
  std::vector<Index> out(static_cast<std::size_t>(b.size()));
  for (Index i = 0; i < b.size(); ++i) out[static_cast<std::size_t>(i)] = b.offset + i;
  return out;
}

const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

}  // namespace

std::string default_symmetry_id(const SymmetryKind& kind) {
  if (auto* r = std::get_if<Rescaling>(&kind)) return "rescale(" + join(r->plus, "+") + "|" + join(r->minus, "+") + ")";
  if (auto* s = std::get_if<Scaling>(&kind)) return "scale(" + join(s->blocks, "+") + ")";
  if (auto* d = std::get_if<DoubleRotationBasis>(&kind)) {
    return "rot(" + d->outer + "|" + d->inner + ";" + std::to_string(d->k) + ":" + std::to_string(d->l) + ")";
  }
  const auto& g = std::get<GenericDense>(kind);
  return "dense(" + join(g.blocks, "+") + ")";
}

SymmetryDescriptor::SymmetryDescriptor(SymmetryKind kind, std::string id)
    : kind_(std::make_shared<const SymmetryKind>(std::move(kind))), id_(std::move(id)) {
  if (id_.empty()) id_ = default_symmetry_id(*kind_);
  if (id_.find_first_of(",\"\n\r") != std::string::npos) {
    throw ConfigError("symmetry id '" + id_ + "' must not contain commas, quotes or line breaks");
  }
  if (auto* g = std::get_if<GenericDense>(kind_.get())) {
    if (g->A.rows() != g->A.cols()) throw ConfigError("symmetry '" + id_ + "': A must be square");
    if ((g->A - g->A.transpose()).norm() > 1e-12 * std::max(1.0, g->A.norm())) {
      throw ConfigError("symmetry '" + id_ + "': A must be symmetric");
    }
    eigen_ = std::make_shared<const Eigen::SelfAdjointEigenSolver<Matrix>>(g->A);
  }
  if (auto* d = std::get_if<DoubleRotationBasis>(kind_.get())) {
    if (d->k < 0 || d->l < 0) throw ConfigError("symmetry '" + id_ + "': indices must be >= 0");
  }
  if (auto* r = std::get_if<Rescaling>(kind_.get())) {
    if (r->plus.empty() && r->minus.empty()) throw ConfigError("symmetry '" + id_ + "': no blocks");
  }
  if (auto* s = std::get_if<Scaling>(kind_.get())) {
    if (s->blocks.empty()) throw ConfigError("symmetry '" + id_ + "': no blocks");
  }
}

std::string SymmetryDescriptor::type_name() const {
  switch (kind_->index()) {
    case 0:
      return "rescaling";
    case 1:
      return "scaling";
    case 2:
      return "double_rotation";
    default:
      return "dense";
  }
}

BoundSymmetry::BoundSymmetry(const SymmetryDescriptor& desc, const BlockLayout& layout)
    : desc_(desc), dim_(layout.dim()) {
  const SymmetryKind& kind = desc.kind();
  if (auto* r = std::get_if<Rescaling>(&kind)) {
    std::set<std::string> seen;
    for (const auto& n : r->plus) {
      if (!seen.insert(n).second) throw ConfigError("symmetry '" + desc.id() + "': block '" + n + "' repeated");
      auto c = block_coords(layout, n);
      plus_.insert(plus_.end(), c.begin(), c.end());
    }
    for (const auto& n : r->minus) {
      if (!seen.insert(n).second) throw ConfigError("symmetry '" + desc.id() + "': block '" + n + "' repeated");
      auto c = block_coords(layout, n);
      minus_.insert(minus_.end(), c.begin(), c.end());
    }
    for (Index i : plus_) modes_.push_back({1.0, {{i, 1.0}}});
    for (Index i : minus_) modes_.push_back({-1.0, {{i, 1.0}}});
  } else if (auto* s = std::get_if<Scaling>(&kind)) {
    std::set<std::string> seen;
    for (const auto& n : s->blocks) {
      if (!seen.insert(n).second) throw ConfigError("symmetry '" + desc.id() + "': block '" + n + "' repeated");
      auto c = block_coords(layout, n);
      plus_.insert(plus_.end(), c.begin(), c.end());
    }
    for (Index i : plus_) modes_.push_back({1.0, {{i, 1.0}}});
  } else if (auto* d = std::get_if<DoubleRotationBasis>(&kind)) {
    const auto& outer = layout.at(d->outer);
    const auto& inner = layout.at(d->inner);
    if (d->outer == d->inner) throw ConfigError("symmetry '" + desc.id() + "': outer and inner must differ");
    if (outer.cols != inner.rows) {
      throw ConfigError("symmetry '" + desc.id() + "': outer columns must equal inner rows");
    }
    if (d->k >= outer.cols || d->l >= outer.cols) {
      throw ConfigError("symmetry '" + desc.id() + "': index exceeds hidden width");
    }
    for (Index r = 0; r < outer.rows; ++r) {
      uk_.push_back(outer.offset + d->k * outer.rows + r);
      ul_.push_back(outer.offset + d->l * outer.rows + r);
    }
    for (Index c = 0; c < inner.cols; ++c) {
      wk_.push_back(inner.offset + c * inner.rows + d->k);
      wl_.push_back(inner.offset + c * inner.rows + d->l);
    }
    if (d->k == d->l) {
      for (Index i : uk_) modes_.push_back({1.0, {{i, 1.0}}});
      for (Index i : wk_) modes_.push_back({-1.0, {{i, 1.0}}});
    } else {
      for (std::size_t r = 0; r < uk_.size(); ++r) {
        modes_.push_back({0.5, {{uk_[r], kInvSqrt2}, {ul_[r], kInvSqrt2}}});
        modes_.push_back({-0.5, {{uk_[r], kInvSqrt2}, {ul_[r], -kInvSqrt2}}});
      }
      for (std::size_t c = 0; c < wk_.size(); ++c) {
        modes_.push_back({-0.5, {{wk_[c], kInvSqrt2}, {wl_[c], kInvSqrt2}}});
        modes_.push_back({0.5, {{wk_[c], kInvSqrt2}, {wl_[c], -kInvSqrt2}}});
      }
    }
  } else {
    const auto& g = std::get<GenericDense>(kind);
    std::set<std::string> seen;
    for (const auto& n : g.blocks) {
      if (!seen.insert(n).second) throw ConfigError("symmetry '" + desc.id() + "': block '" + n + "' repeated");
      auto c = block_coords(layout, n);
      support_.insert(support_.end(), c.begin(), c.end());
    }
    if (static_cast<Index>(support_.size()) != g.A.rows()) {
      throw ConfigError("symmetry '" + desc.id() + "': A is " + std::to_string(g.A.rows()) +
                        " wide but the blocks span " + std::to_string(support_.size()) + " coordinates");
    }
    const auto& es = *desc.dense_eigen();
    for (Index j = 0; j < es.eigenvalues().size(); ++j) {
      EigenMode m;
      m.mu = es.eigenvalues()(j);
      for (std::size_t i = 0; i < support_.size(); ++i) {
        const double c = es.eigenvectors()(static_cast<Index>(i), j);
        if (c != 0.0) m.vec.push_back({support_[i], c});
      }
      modes_.push_back(std::move(m));
    }
  }
}

double BoundSymmetry::max_abs_mu() const {
  double m = 0.0;
  for (const auto& mode : modes_) m = std::max(m, std::abs(mode.mu));
  return m;
}

Vector BoundSymmetry::apply(const Vector& v) const {
  if (v.size() != dim_) throw ConfigError("vector dimension does not match symmetry '" + desc_.id() + "'");
  Vector out = Vector::Zero(dim_);
  const SymmetryKind& kind = desc_.kind();
  if (std::holds_alternative<Rescaling>(kind) || std::holds_alternative<Scaling>(kind)) {
    for (Index i : plus_) out(i) = v(i);
    for (Index i : minus_) out(i) = -v(i);
  } else if (auto* d = std::get_if<DoubleRotationBasis>(&kind)) {
    if (d->k == d->l) {
      for (Index i : uk_) out(i) = v(i);
      for (Index i : wk_) out(i) = -v(i);
    } else {
      for (std::size_t r = 0; r < uk_.size(); ++r) {
        out(uk_[r]) = 0.5 * v(ul_[r]);
        out(ul_[r]) = 0.5 * v(uk_[r]);
      }
      for (std::size_t c = 0; c < wk_.size(); ++c) {
        out(wk_[c]) = -0.5 * v(wl_[c]);
        out(wl_[c]) = -0.5 * v(wk_[c]);
      }
    }
  } else {
    const auto& A = std::get<GenericDense>(kind).A;
    Vector sub(static_cast<Index>(support_.size()));
    for (std::size_t i = 0; i < support_.size(); ++i) sub(static_cast<Index>(i)) = v(support_[i]);
    Vector res = A * sub;
    for (std::size_t i = 0; i < support_.size(); ++i) out(support_[i]) = res(static_cast<Index>(i));
  }
  return out;
}

double BoundSymmetry::quadratic(const Vector& a, const Vector& b) const {
  if (a.size() != dim_ || b.size() != dim_) {
    throw ConfigError("vector dimension does not match symmetry '" + desc_.id() + "'");
  }
  const SymmetryKind& kind = desc_.kind();
  double s = 0.0;
  if (std::holds_alternative<Rescaling>(kind) || std::holds_alternative<Scaling>(kind)) {
    for (Index i : plus_) s += a(i) * b(i);
    for (Index i : minus_) s -= a(i) * b(i);
  } else if (auto* d = std::get_if<DoubleRotationBasis>(&kind)) {
    if (d->k == d->l) {
      for (Index i : uk_) s += a(i) * b(i);
      for (Index i : wk_) s -= a(i) * b(i);
    } else {
      for (std::size_t r = 0; r < uk_.size(); ++r) s += 0.5 * (a(uk_[r]) * b(ul_[r]) + a(ul_[r]) * b(uk_[r]));
      for (std::size_t c = 0; c < wk_.size(); ++c) s -= 0.5 * (a(wk_[c]) * b(wl_[c]) + a(wl_[c]) * b(wk_[c]));
    }
  } else {
    s = a.dot(apply(b));
  }
  return s;
}

double BoundSymmetry::charge(const Vector& theta) const { return quadratic(theta, theta); }

Vector BoundSymmetry::exp_map(double lambda, const Vector& theta) const {
  if (theta.size() != dim_) throw ConfigError("vector dimension does not match symmetry '" + desc_.id() + "'");
  if (!std::isfinite(lambda)) throw NumericalError("exp_map requires a finite lambda");
  Vector out = theta;
  const SymmetryKind& kind = desc_.kind();
  if (std::holds_alternative<Rescaling>(kind) || std::holds_alternative<Scaling>(kind)) {
    const double up = std::exp(lambda);
    const double down = std::exp(-lambda);
    for (Index i : plus_) out(i) = up * theta(i);
    for (Index i : minus_) out(i) = down * theta(i);
  } else if (auto* d = std::get_if<DoubleRotationBasis>(&kind)) {
    if (d->k == d->l) {
      const double up = std::exp(lambda);
      const double down = std::exp(-lambda);
      for (Index i : uk_) out(i) = up * theta(i);
      for (Index i : wk_) out(i) = down * theta(i);
    } else {
      const double ch = std::cosh(0.5 * lambda);
      const double sh = std::sinh(0.5 * lambda);
      for (std::size_t r = 0; r < uk_.size(); ++r) {
        out(uk_[r]) = ch * theta(uk_[r]) + sh * theta(ul_[r]);
        out(ul_[r]) = sh * theta(uk_[r]) + ch * theta(ul_[r]);
      }
      for (std::size_t c = 0; c < wk_.size(); ++c) {
        out(wk_[c]) = ch * theta(wk_[c]) - sh * theta(wl_[c]);
        out(wl_[c]) = -sh * theta(wk_[c]) + ch * theta(wl_[c]);
      }
    }
  } else {
    const auto& es = *desc_.dense_eigen();
    Vector sub(static_cast<Index>(support_.size()));
    for (std::size_t i = 0; i < support_.size(); ++i) sub(static_cast<Index>(i)) = theta(support_[i]);
    Vector scaled = (es.eigenvalues() * lambda).array().exp().matrix();
    Vector res = es.eigenvectors() * scaled.cwiseProduct(es.eigenvectors().transpose() * sub);
    for (std::size_t i = 0; i < support_.size(); ++i) out(support_[i]) = res(static_cast<Index>(i));
  }
  return out;
}

double BoundSymmetry::trace_with(const Matrix& S) const {
  if (S.rows() != dim_ || S.cols() != dim_) {
    throw ConfigError("matrix dimension does not match symmetry '" + desc_.id() + "'");
  }
  double t = 0.0;
  for (const auto& m : modes_) {
    double q = 0.0;
    for (const auto& [i, ci] : m.vec)
      for (const auto& [j, cj] : m.vec) q += ci * cj * S(i, j);
    t += m.mu * q;
  }
  return t;
}

Matrix BoundSymmetry::dense() const {
  Matrix A(dim_, dim_);
  for (Index j = 0; j < dim_; ++j) A.col(j) = apply(Vector::Unit(dim_, j));
  return A;
}

}  // namespace noiselab
