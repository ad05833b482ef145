#pragma once

#include "noiselab/descriptor.hpp"

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace noiselab {

// Largest P for which a dense P x P covariance is assembled.
inline constexpr Index kMaxFullCovarianceDim = 4096;

// Per-sample gradient statistics over a finite training set (uniform weights).
struct NoiseStats {
  enum class Mode { Full, TraceOnly };
  Mode mode = Mode::Full;
  Matrix sigma;  // Full only
  Vector mean;   // mean gradient, both modes
  std::map<std::string, double> traces;  // TraceOnly: descriptor id -> Tr[Sigma A]
  Index n = 0;
};

// Columns of grads are flattened per-sample gradients.
NoiseStats estimate_full_covariance(const Matrix& grads);
NoiseStats estimate_full_covariance(const std::vector<Vector>& grads);

// Tr[Sigma A] without forming Sigma: mean of centered g^T A g.
double trace_sigma_A(const Matrix& grads, const BoundSymmetry& sym);
double trace_sigma_A(const Matrix& grads, const SymmetryDescriptor& desc, const BlockLayout& layout);

NoiseStats estimate_traces(const Matrix& grads, const std::vector<SymmetryDescriptor>& descs,
                           const BlockLayout& layout);

// Covariance of the coordinates of one block.
Matrix block_covariance(const Matrix& grads, const BlockLayout& layout, std::string_view block);

// Tr[Sigma A] read from either mode.
double trace_from_stats(const NoiseStats& stats, const BoundSymmetry& sym);

}  // namespace noiselab
