#include "noiselab/noise.hpp"

#include "noiselab/errors.hpp"

namespace noiselab {

namespace {

void require_samples(const Matrix& grads) {
  if (grads.cols() < 2) throw ConfigError("noise estimation needs at least two gradients");
}

}  // namespace

NoiseStats estimate_full_covariance(const Matrix& grads) {
  require_samples(grads);
  if (grads.rows() > kMaxFullCovarianceDim) {
    throw ConfigError("full covariance refused for P = " + std::to_string(grads.rows()) + " (limit " +
                      std::to_string(kMaxFullCovarianceDim) + "); use trace-only statistics");
  }
  NoiseStats s;
  s.mode = NoiseStats::Mode::Full;
  s.n = grads.cols();
  s.mean = grads.rowwise().mean();
  Matrix centered = grads.colwise() - s.mean;
  s.sigma = symmetrize(centered * centered.transpose() / static_cast<double>(s.n));
  return s;
}

NoiseStats estimate_full_covariance(const std::vector<Vector>& grads) {
  if (grads.size() < 2) throw ConfigError("noise estimation needs at least two gradients");
  const Index P = grads.front().size();
  Matrix G(P, static_cast<Index>(grads.size()));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != P) throw ConfigError("gradient " + std::to_string(i) + " has a different dimension");
    G.col(static_cast<Index>(i)) = grads[i];
  }
  return estimate_full_covariance(G);
}

double trace_sigma_A(const Matrix& grads, const BoundSymmetry& sym) {
  require_samples(grads);
  if (grads.rows() != sym.dim()) throw ConfigError("gradient dimension does not match the symmetry");
  const Vector mean = grads.rowwise().mean();
  double t = 0.0;
  for (Index s = 0; s < grads.cols(); ++s) {
    const Vector c = grads.col(s) - mean;
    t += sym.quadratic(c, c);
  }
  return t / static_cast<double>(grads.cols());
}

double trace_sigma_A(const Matrix& grads, const SymmetryDescriptor& desc, const BlockLayout& layout) {
  return trace_sigma_A(grads, BoundSymmetry(desc, layout));
}

NoiseStats estimate_traces(const Matrix& grads, const std::vector<SymmetryDescriptor>& descs,
                           const BlockLayout& layout) {
  require_samples(grads);
  NoiseStats s;
  s.mode = NoiseStats::Mode::TraceOnly;
  s.n = grads.cols();
  s.mean = grads.rowwise().mean();
  for (const auto& d : descs) s.traces[d.id()] = trace_sigma_A(grads, BoundSymmetry(d, layout));
  return s;
}

Matrix block_covariance(const Matrix& grads, const BlockLayout& layout, std::string_view block) {
  require_samples(grads);
  if (grads.rows() != layout.dim()) throw ConfigError("gradient dimension does not match the layout");
  const auto& b = layout.at(block);
  Matrix sub = grads.middleRows(b.offset, b.size());
  const Vector mean = sub.rowwise().mean();
  Matrix centered = sub.colwise() - mean;
  return symmetrize(centered * centered.transpose() / static_cast<double>(grads.cols()));
}

double trace_from_stats(const NoiseStats& stats, const BoundSymmetry& sym) {
  if (stats.mode == NoiseStats::Mode::Full) return sym.trace_with(stats.sigma);
  auto it = stats.traces.find(sym.descriptor().id());
  if (it == stats.traces.end()) {
    throw ConfigError("noise statistics carry no trace for symmetry '" + sym.descriptor().id() + "'");
  }
  return it->second;
}

}  // namespace noiselab
