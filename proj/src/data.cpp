#include "noiselab/data.hpp"

#include "noiselab/errors.hpp"
#include "noiselab/io.hpp"
#include "noiselab/rng.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

namespace noiselab {

Dataset::Dataset(Matrix X, Matrix Y) : X_(std::move(X)), Y_(std::move(Y)) {
  if (X_.cols() != Y_.cols()) throw ConfigError("input and label counts differ");
}

Dataset::Dataset(const std::vector<Sample>& samples) {
  if (samples.empty()) throw ConfigError("no samples");
  const Index dx = samples.front().x.size();
  const Index dy = samples.front().y.size();
  X_.resize(dx, static_cast<Index>(samples.size()));
  Y_.resize(dy, static_cast<Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].x.size() != dx || samples[i].y.size() != dy) {
      throw ConfigError("sample " + std::to_string(i) + " has inconsistent dimensions");
    }
    X_.col(static_cast<Index>(i)) = samples[i].x;
    Y_.col(static_cast<Index>(i)) = samples[i].y;
  }
}

std::vector<Sample> Dataset::samples() const {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(size()));
  for (Index i = 0; i < size(); ++i) out.push_back(sample(i));
  return out;
}

Dataset Dataset::subset(const std::vector<Index>& indices) const {
  Matrix X(input_dim(), static_cast<Index>(indices.size()));
  Matrix Y(output_dim(), static_cast<Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    X.col(static_cast<Index>(j)) = X_.col(indices[j]);
    Y.col(static_cast<Index>(j)) = Y_.col(indices[j]);
  }
  return Dataset(std::move(X), std::move(Y));
}

void validate(const DataSpec& spec) {
  if (spec.d_x < 1) throw ConfigError("data.d_x must be >= 1");
  if (spec.n < 1) throw ConfigError("data.n must be >= 1");
  const Vector iv = input_variances(spec);
  if ((iv.array() < 0.0).any()) throw ConfigError("data.input: variances must be >= 0");
  const Vector nv = label_noise_variances(spec);
  if ((nv.array() < 0.0).any()) throw ConfigError("data.noise: variances must be >= 0");
  const Matrix V = teacher_matrix(spec);
  if (V.cols() != spec.d_x) throw ConfigError("data.teacher.matrix must have d_x columns");
}

Index output_dim(const DataSpec& spec) {
  switch (spec.teacher.kind) {
    case TeacherSpec::Kind::Identity:
      return spec.d_x;
    case TeacherSpec::Kind::Random:
      if (spec.teacher.d_y < 1) throw ConfigError("data.teacher.d_y must be >= 1");
      return spec.teacher.d_y;
    case TeacherSpec::Kind::Explicit:
      if (spec.teacher.matrix.size() == 0) throw ConfigError("data.teacher.matrix is empty");
      return spec.teacher.matrix.rows();
  }
  return spec.d_x;
}

Vector input_variances(const DataSpec& spec) {
  Vector v(spec.d_x);
  switch (spec.input.kind) {
    case InputSpec::Kind::Isotropic:
      v.setConstant(spec.input.variance);
      break;
    case InputSpec::Kind::Split: {
      const Index half = spec.d_x / 2;
      v.head(half).setConstant(spec.input.phi);
      v.tail(spec.d_x - half).setConstant(2.0 - spec.input.phi);
      break;
    }
    case InputSpec::Kind::Diagonal:
      if (static_cast<Index>(spec.input.diagonal.size()) != spec.d_x) {
        throw ConfigError("data.input.diagonal must have d_x entries");
      }
      for (Index i = 0; i < spec.d_x; ++i) v(i) = spec.input.diagonal[static_cast<std::size_t>(i)];
      break;
  }
  return v;
}

Vector label_noise_variances(const DataSpec& spec) {
  const Index dy = output_dim(spec);
  Vector v(dy);
  if (!spec.noise.diagonal.empty()) {
    if (static_cast<Index>(spec.noise.diagonal.size()) != dy) {
      throw ConfigError("data.noise.diagonal must have d_y entries");
    }
    for (Index i = 0; i < dy; ++i) v(i) = spec.noise.diagonal[static_cast<std::size_t>(i)];
  } else {
    v.setConstant(spec.noise.variance);
  }
  for (const auto& [i, var] : spec.noise.overrides) {
    if (i < 0 || i >= dy) throw ConfigError("data.noise.overrides index out of range");
    v(i) = var;
  }
  return v;
}

Matrix teacher_matrix(const DataSpec& spec) {
  switch (spec.teacher.kind) {
    case TeacherSpec::Kind::Identity:
      return Matrix::Identity(spec.d_x, spec.d_x);
    case TeacherSpec::Kind::Random: {
      const Index dy = output_dim(spec);
      CounterRng rng(spec.seed, Stream::Teacher);
      const double sd = spec.teacher.scale / std::sqrt(static_cast<double>(spec.d_x));
      Matrix V(dy, spec.d_x);
      for (Index j = 0; j < V.cols(); ++j)
        for (Index i = 0; i < V.rows(); ++i) V(i, j) = sd * rng.normal();
      return V;
    }
    case TeacherSpec::Kind::Explicit:
      return spec.teacher.matrix;
  }
  return {};
}

Dataset generate_dataset(const DataSpec& spec) {
  validate(spec);
  const Vector xsd = input_variances(spec).cwiseSqrt();
  const Vector esd = label_noise_variances(spec).cwiseSqrt();
  const Matrix V = teacher_matrix(spec);
  CounterRng rng(spec.seed, Stream::Data);
  Matrix X(spec.d_x, spec.n);
  Matrix E(V.rows(), spec.n);
  for (Index s = 0; s < spec.n; ++s) {
    for (Index i = 0; i < spec.d_x; ++i) X(i, s) = xsd(i) * rng.normal();
    for (Index i = 0; i < E.rows(); ++i) E(i, s) = esd(i) * rng.normal();
  }
  Matrix Y = V * X + E;
  return Dataset(std::move(X), std::move(Y));
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, e - b + 1);
}

}  // namespace

Dataset load_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || trim(line).empty()) throw ParseError(path.string() + ": no samples");
  const auto header = split_csv(trim(line));
  Index dx = 0, dy = 0;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string h = trim(header[i]);
    const std::string expect_x = "x_" + std::to_string(dx);
    const std::string expect_y = "y_" + std::to_string(dy);
    if (dy == 0 && h == expect_x) {
      ++dx;
    } else if (h == expect_y) {
      ++dy;
    } else {
      throw ParseError(path.string() + ": line 1: unexpected header column '" + h + "'");
    }
  }
  if (dx == 0 || dy == 0) throw ParseError(path.string() + ": line 1: header needs x_ and y_ columns");

  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_csv(trim(line));
    if (static_cast<Index>(cells.size()) != dx + dy) {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": expected " +
                       std::to_string(dx + dy) + " values, got " + std::to_string(cells.size()));
    }
    std::vector<double> row;
    for (const auto& c : cells) {
      const std::string t = trim(c);
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
      if (ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v)) {
        throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": bad value '" + t + "'");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(path.string() + ": no samples");
  Matrix X(dx, static_cast<Index>(rows.size()));
  Matrix Y(dy, static_cast<Index>(rows.size()));
  for (std::size_t s = 0; s < rows.size(); ++s) {
    for (Index i = 0; i < dx; ++i) X(i, static_cast<Index>(s)) = rows[s][static_cast<std::size_t>(i)];
    for (Index i = 0; i < dy; ++i) Y(i, static_cast<Index>(s)) = rows[s][static_cast<std::size_t>(dx + i)];
  }
  return Dataset(std::move(X), std::move(Y));
}

void save_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  std::string out;
  for (Index i = 0; i < data.input_dim(); ++i) out += (i ? ",x_" : "x_") + std::to_string(i);
  for (Index i = 0; i < data.output_dim(); ++i) out += ",y_" + std::to_string(i);
  out += '\n';
  for (Index s = 0; s < data.size(); ++s) {
    for (Index i = 0; i < data.input_dim(); ++i) {
      if (i) out += ',';
      out += format_double(data.X()(i, s));
    }
    for (Index i = 0; i < data.output_dim(); ++i) {
      out += ',';
      out += format_double(data.Y()(i, s));
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

}  // namespace noiselab
