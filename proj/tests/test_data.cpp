#include "noiselab/data.hpp"
#include "noiselab/errors.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <fstream>

using namespace noiselab;

namespace {

DataSpec isotropic(Index d_x, Index n, std::uint64_t seed) {
  DataSpec d;
  d.d_x = d_x;
  d.n = n;
  d.seed = seed;
  return d;
}

Matrix empirical_cov(const Matrix& X) { return X * X.transpose() / static_cast<double>(X.cols()); }

}  // namespace

TEST_CASE("isotropic inputs have identity covariance at large n") {
  auto data = generate_dataset(isotropic(5, 100000, 3));
  CHECK(data.size() == 100000);
  Matrix C = empirical_cov(data.X());
  CHECK((C - Matrix::Identity(5, 5)).norm() / std::sqrt(5.0) < 0.05);
}

TEST_CASE("identity teacher without noise copies the input") {
  auto data = generate_dataset(isotropic(4, 50, 1));
  CHECK(data.Y() == data.X());
}

TEST_CASE("split inputs use phi and two minus phi") {
  DataSpec d = isotropic(6, 10, 0);
  d.input.kind = InputSpec::Kind::Split;
  d.input.phi = 1.0;
  CHECK(input_variances(d) == Vector::Ones(6));
  d.input.phi = 0.25;
  Vector v = input_variances(d);
  CHECK(v(0) == 0.25);
  CHECK(v(2) == 0.25);
  CHECK(v(3) == 1.75);
  d.d_x = 5;
  v = input_variances(d);
  CHECK(v(1) == 0.25);
  CHECK(v(2) == 1.75);

  d.d_x = 4;
  d.n = 80000;
  d.input.phi = 0.5;
  auto data = generate_dataset(d);
  Vector emp = empirical_cov(data.X()).diagonal();
  CHECK(emp(0) == doctest::Approx(0.5).epsilon(0.03));
  CHECK(emp(3) == doctest::Approx(1.5).epsilon(0.03));
}

TEST_CASE("label noise variances with overrides") {
  DataSpec d = isotropic(3, 60000, 9);
  d.noise.variance = 0.5;
  d.noise.overrides = {{1, 2.0}};
  Vector v = label_noise_variances(d);
  CHECK(v(0) == 0.5);
  CHECK(v(1) == 2.0);
  auto data = generate_dataset(d);
  Matrix eps = data.Y() - teacher_matrix(d) * data.X();
  Vector emp = empirical_cov(eps).diagonal();
  CHECK(emp(0) == doctest::Approx(0.5).epsilon(0.03));
  CHECK(emp(1) == doctest::Approx(2.0).epsilon(0.03));
  d.noise.overrides = {{5, 1.0}};
  CHECK_THROWS_AS(validate(d), ConfigError);
}

TEST_CASE("random teacher is reproducible and scaled") {
  DataSpec d = isotropic(200, 1, 4);
  d.teacher.kind = TeacherSpec::Kind::Random;
  d.teacher.d_y = 100;
  d.teacher.scale = 2.0;
  Matrix V = teacher_matrix(d);
  CHECK(V.rows() == 100);
  CHECK(V.cols() == 200);
  CHECK(V == teacher_matrix(d));
  CHECK(V.squaredNorm() / V.size() == doctest::Approx(4.0 / 200).epsilon(0.03));
  CHECK(output_dim(d) == 100);
}

TEST_CASE("identical specs give bit-identical datasets") {
  DataSpec d = isotropic(3, 40, 12);
  d.teacher.kind = TeacherSpec::Kind::Random;
  d.teacher.d_y = 2;
  d.noise.variance = 0.1;
  auto a = generate_dataset(d);
  auto b = generate_dataset(d);
  CHECK(a.X() == b.X());
  CHECK(a.Y() == b.Y());
  d.seed = 13;
  CHECK(generate_dataset(d).X() != a.X());
}

TEST_CASE("dataset csv round-trips bit-exactly") {
  auto dir = testutil::scratch("dataset_csv");
  DataSpec d = isotropic(2, 25, 6);
  d.noise.variance = 0.3;
  auto a = generate_dataset(d);
  save_dataset_csv(dir / "d.csv", a);
  auto b = load_dataset_csv(dir / "d.csv");
  CHECK(a.X() == b.X());
  CHECK(a.Y() == b.Y());
}

TEST_CASE("small csv parses with declared dims") {
  auto dir = testutil::scratch("dataset_small");
  {
    std::ofstream f(dir / "s.csv");
    f << "x_0,x_1,y_0\n1,2,3\n4,5,6\n7,8,9\n";
  }
  auto d = load_dataset_csv(dir / "s.csv");
  CHECK(d.size() == 3);
  CHECK(d.input_dim() == 2);
  CHECK(d.output_dim() == 1);
  CHECK(d.Y()(0, 2) == 9.0);
}

TEST_CASE("malformed csv files") {
  auto dir = testutil::scratch("dataset_bad");
  {
    std::ofstream f(dir / "empty.csv");
  }
  CHECK_THROWS_WITH_AS(load_dataset_csv(dir / "empty.csv"), doctest::Contains("no samples"), ParseError);
  {
    std::ofstream f(dir / "header.csv");
    f << "x_0,y_0\n";
  }
  CHECK_THROWS_WITH_AS(load_dataset_csv(dir / "header.csv"), doctest::Contains("no samples"), ParseError);
  {
    std::ofstream f(dir / "bad.csv");
    f << "x_0,y_0\n1,2\n3,abc\n";
  }
  CHECK_THROWS_WITH_AS(load_dataset_csv(dir / "bad.csv"), doctest::Contains("line 3"), ParseError);
}

TEST_CASE("subset keeps the chosen columns") {
  auto data = generate_dataset(isotropic(2, 10, 2));
  auto sub = data.subset({4, 1});
  CHECK(sub.size() == 2);
  CHECK(sub.X().col(0) == data.X().col(4));
}
