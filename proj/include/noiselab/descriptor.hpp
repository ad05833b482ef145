#pragma once

#include "noiselab/params.hpp"

#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace noiselab {

// A = diag(I, -I): plus blocks grow, minus blocks shrink.
struct Rescaling {
  std::vector<std::string> plus;
  std::vector<std::string> minus;
};

// A = I on the listed blocks.
struct Scaling {
  std::vector<std::string> blocks;
};

// Generator for the (k, l) basis element of the rotation family between a
// factor pair: outer columns and inner rows are mixed by e^{+-lambda B/2},
// where B = e_k e_l^T + e_l e_k^T. Charge is u_k.u_l - w_k.w_l with u_k the
// k-th column of outer and w_k the k-th row of inner.
struct DoubleRotationBasis {
  std::string outer;
  std::string inner;
  Index k = 0;
  Index l = 0;
};

// Arbitrary symmetric A over the concatenated (flattened) coordinates of the
// listed blocks.
struct GenericDense {
  std::vector<std::string> blocks;
  Matrix A;
};

using SymmetryKind = std::variant<Rescaling, Scaling, DoubleRotationBasis, GenericDense>;

// One eigenpair of A with a sparse unit eigenvector in flat coordinates.
struct EigenMode {
  double mu = 0.0;
  std::vector<std::pair<Index, double>> vec;
};

class SymmetryDescriptor {
 public:
  explicit SymmetryDescriptor(SymmetryKind kind, std::string id = "");

  const std::string& id() const { return id_; }
  const SymmetryKind& kind() const { return *kind_; }
  std::string type_name() const;
  // Cached eigendecomposition of a GenericDense generator.
  const Eigen::SelfAdjointEigenSolver<Matrix>* dense_eigen() const { return eigen_.get(); }

 private:
  std::shared_ptr<const SymmetryKind> kind_;
  std::shared_ptr<const Eigen::SelfAdjointEigenSolver<Matrix>> eigen_;
  std::string id_;
};

std::string default_symmetry_id(const SymmetryKind& kind);

// A descriptor resolved against a parameter layout.
class BoundSymmetry {
 public:
  BoundSymmetry(const SymmetryDescriptor& desc, const BlockLayout& layout);

  const SymmetryDescriptor& descriptor() const { return desc_; }
  Index dim() const { return dim_; }
  const std::vector<EigenMode>& modes() const { return modes_; }
  double max_abs_mu() const;

  Vector apply(const Vector& v) const;
  double quadratic(const Vector& a, const Vector& b) const;
  double charge(const Vector& theta) const;
  Vector exp_map(double lambda, const Vector& theta) const;
  // Tr[S A] for a symmetric P x P matrix S.
  double trace_with(const Matrix& S) const;
  Matrix dense() const;

 private:
  SymmetryDescriptor desc_;
  Index dim_ = 0;
  std::vector<EigenMode> modes_;
  // Rescaling/Scaling: coordinates scaled by e^{+lambda} and e^{-lambda}.
  std::vector<Index> plus_;
  std::vector<Index> minus_;
  // DoubleRotationBasis: coordinate lists of u_k, u_l, w_k, w_l.
  std::vector<Index> uk_, ul_, wk_, wl_;
  // GenericDense: support coordinates.
  std::vector<Index> support_;
};

}  // namespace noiselab
