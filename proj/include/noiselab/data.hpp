#pragma once

#include "noiselab/linalg.hpp"

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace noiselab {

struct Sample {
  Vector x;
  Vector y;
};

// Samples stored column-wise: X is d_x by n, Y is d_y by n.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Matrix X, Matrix Y);
  explicit Dataset(const std::vector<Sample>& samples);

  Index size() const { return X_.cols(); }
  Index input_dim() const { return X_.rows(); }
  Index output_dim() const { return Y_.rows(); }
  const Matrix& X() const { return X_; }
  const Matrix& Y() const { return Y_; }
  Sample sample(Index i) const { return {X_.col(i), Y_.col(i)}; }
  std::vector<Sample> samples() const;
  Dataset subset(const std::vector<Index>& indices) const;

 private:
  Matrix X_;
  Matrix Y_;
};

struct InputSpec {
  enum class Kind { Isotropic, Split, Diagonal };
  Kind kind = Kind::Isotropic;
  double variance = 1.0;
  // Split: the first floor(d_x/2) coordinates get variance phi, the rest 2 - phi.
  double phi = 1.0;
  std::vector<double> diagonal;
};

struct TeacherSpec {
  enum class Kind { Identity, Random, Explicit };
  Kind kind = Kind::Identity;
  Index d_y = 0;  // ignored for Identity
  // Random teacher entries are N(0, scale^2 / d_x).
  double scale = 1.0;
  Matrix matrix;  // Explicit only, d_y by d_x
};

// Diagonal label-noise covariance: a common variance with per-coordinate
// overrides, or a full diagonal.
struct LabelNoiseSpec {
  double variance = 0.0;
  std::vector<std::pair<Index, double>> overrides;
  std::vector<double> diagonal;
};

struct DataSpec {
  Index d_x = 1;
  InputSpec input;
  TeacherSpec teacher;
  LabelNoiseSpec noise;
  Index n = 1;
  std::uint64_t seed = 0;
};

void validate(const DataSpec& spec);
Index output_dim(const DataSpec& spec);
Vector input_variances(const DataSpec& spec);
Vector label_noise_variances(const DataSpec& spec);
// Teacher matrix V (d_y by d_x); random teachers are reproducible from the seed.
Matrix teacher_matrix(const DataSpec& spec);

// y = V x + eps with x ~ N(0, diag(input variances)), eps ~ N(0, diag(noise variances)).
Dataset generate_dataset(const DataSpec& spec);

// CSV with header x_0..x_{dx-1},y_0..y_{dy-1}; values written in shortest
// round-trip form.
Dataset load_dataset_csv(const std::filesystem::path& path);
void save_dataset_csv(const std::filesystem::path& path, const Dataset& data);

}  // namespace noiselab
