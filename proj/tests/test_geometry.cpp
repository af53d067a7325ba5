#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "orient/geometry.hpp"

using namespace orient;

namespace {

double matrix_max_abs_diff(const RotationMatrix3& a, const RotationMatrix3& b) {
  double m = 0;
  for (int i = 0; i < 9; ++i) m = std::max(m, std::abs(a.m[i] - b.m[i]));
  return m;
}

RotationMatrix3 rot_z(double t) {
  RotationMatrix3 r;
  r.m = {std::cos(t), -std::sin(t), 0, std::sin(t), std::cos(t), 0, 0, 0, 1};
  return r;
}

RotationMatrix3 rot_y(double t) {
  RotationMatrix3 r;
  r.m = {std::cos(t), 0, std::sin(t), 0, 1, 0, -std::sin(t), 0, std::cos(t)};
  return r;
}

UnitQuaternion random_quat(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  return UnitQuaternion(n(rng), n(rng), n(rng), n(rng));
}

}  // namespace

TEST_CASE("axis-angle construction") {
  auto qid = UnitQuaternion::from_axis_angle({0, 0, 1}, 0.0);
  CHECK(qid.approx_equal(UnitQuaternion(1, 0, 0, 0), 1e-12));

  auto qhalf = UnitQuaternion::from_axis_angle({0, 0, 1}, kPi);
  CHECK(qhalf.approx_equal(UnitQuaternion(0, 0, 0, 1), 1e-9));

  auto qx = UnitQuaternion::from_axis_angle({1, 0, 0}, 0.5 * kPi);
  const double s = std::sqrt(2.0) / 2.0;
  CHECK(qx.approx_equal(UnitQuaternion(s, s, 0, 0), 1e-12));

  CHECK_THROWS_AS(UnitQuaternion::from_axis_angle({1, 1, 0}, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(UnitQuaternion::from_axis_angle({0, 0, 1}, -0.1), std::invalid_argument);
}

TEST_CASE("unit norm and canonical sign invariants") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    UnitQuaternion q(n(rng), n(rng), n(rng), n(rng));
    const double norm =
        q.a() * q.a() + q.b() * q.b() + q.c() * q.c() + q.d() * q.d();
    CHECK(std::abs(norm - 1.0) < 1e-9);
    CHECK(q.a() >= 0.0);
  }
  // explicit canonical tie-breaks at a == 0
  CHECK(UnitQuaternion(0, 0, 0, -1).approx_equal(UnitQuaternion(0, 0, 0, 1), 0.0));
  CHECK(UnitQuaternion(0, -1, 0, 0).approx_equal(UnitQuaternion(0, 1, 0, 0), 0.0));
  // canonicalization is idempotent: re-constructing from components is a no-op
  UnitQuaternion q(0.3, -0.4, 0.5, -0.6);
  UnitQuaternion q2(q.a(), q.b(), q.c(), q.d());
  CHECK(q.approx_equal(q2, 0.0));
  CHECK(matrix_max_abs_diff(quat_to_matrix(q), quat_to_matrix(q2)) == 0.0);
}

TEST_CASE("quaternion to rotation matrix") {
  CHECK(matrix_max_abs_diff(quat_to_matrix(UnitQuaternion(1, 0, 0, 0)),
                            RotationMatrix3::identity()) == 0.0);

  // double cover: negated components give the identical matrix
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_quat(rng);
    UnitQuaternion neg(-q.a(), -q.b(), -q.c(), -q.d());
    CHECK(matrix_max_abs_diff(quat_to_matrix(q), quat_to_matrix(neg)) == 0.0);
  }

  // orthogonality and determinant
  for (int trial = 0; trial < 100; ++trial) {
    auto q = random_quat(rng);
    auto r = quat_to_matrix(q);
    CHECK(matrix_max_abs_diff(r * r.transposed(), RotationMatrix3::identity()) < 1e-8);
    CHECK(std::abs(r.determinant() - 1.0) < 1e-8);
  }

  // homomorphism against direct matrix multiplication
  for (int trial = 0; trial < 100; ++trial) {
    auto q = random_quat(rng);
    auto p = random_quat(rng);
    auto lhs = quat_to_matrix(q * p);
    auto rhs = quat_to_matrix(q) * quat_to_matrix(p);
    CHECK(matrix_max_abs_diff(lhs, rhs) < 1e-12);
  }
}

TEST_CASE("euler ZYZ conversions") {
  CHECK(euler_zyz_to_quat({0, 0, 0}).approx_equal(UnitQuaternion(1, 0, 0, 0), 1e-15));

  auto qy = euler_zyz_to_quat({0, 0.5 * kPi, 0});
  CHECK(qy.approx_equal(UnitQuaternion::from_axis_angle({0, 1, 0}, 0.5 * kPi), 1e-12));

  CHECK_THROWS_AS(euler_zyz_to_quat({-0.1, 0, 0}), std::invalid_argument);
  CHECK_THROWS_AS(euler_zyz_to_quat({0, 3.2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(euler_zyz_to_quat({0, 0, kTwoPi}), std::invalid_argument);

  // matrix-product oracle: R(e) == Rz(theta3) * Ry(theta2) * Rz(theta1)
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    EulerZYZ e{u01(rng) * kTwoPi * 0.999, u01(rng) * kPi, u01(rng) * kTwoPi * 0.999};
    auto r = quat_to_matrix(euler_zyz_to_quat(e));
    auto oracle = rot_z(e.theta3) * rot_y(e.theta2) * rot_z(e.theta1);
    CHECK(matrix_max_abs_diff(r, oracle) < 1e-8);
  }

  // round trip away from gimbal lock
  for (int trial = 0; trial < 1000; ++trial) {
    EulerZYZ e{u01(rng) * kTwoPi * 0.999, 0.05 + u01(rng) * (kPi - 0.1),
               u01(rng) * kTwoPi * 0.999};
    EulerZYZ back = quat_to_euler_zyz(euler_zyz_to_quat(e));
    CHECK(std::abs(back.theta3 - e.theta3) < 1e-6);
    CHECK(std::abs(back.theta2 - e.theta2) < 1e-6);
    CHECK(std::abs(back.theta1 - e.theta1) < 1e-6);
  }

  // gimbal lock convention: theta3 folds into theta1
  EulerZYZ locked = quat_to_euler_zyz(euler_zyz_to_quat({1.0, 0.0, 0.5}));
  CHECK(locked.theta3 == 0.0);
  CHECK(locked.theta2 == 0.0);
  CHECK(std::abs(locked.theta1 - 1.5) < 1e-9);
}

TEST_CASE("orientation distance") {
  std::mt19937_64 rng(5);
  auto q = random_quat(rng);
  CHECK(quat_distance(q, q) == 0.0);

  UnitQuaternion neg(-q.a(), -q.b(), -q.c(), -q.d());
  CHECK(quat_distance(q, neg) == 0.0);

  auto qz = UnitQuaternion::from_axis_angle({0, 0, 1}, 0.5 * kPi);
  CHECK(quat_distance(UnitQuaternion(1, 0, 0, 0), qz) == doctest::Approx(0.5 * kPi).epsilon(1e-12));

  // pseudometric on S^3, metric on the antipodal quotient
  for (int trial = 0; trial < 1000; ++trial) {
    auto x = random_quat(rng);
    auto y = random_quat(rng);
    auto z = random_quat(rng);
    const double dxy = quat_distance(x, y);
    const double dyx = quat_distance(y, x);
    const double dxz = quat_distance(x, z);
    const double dzy = quat_distance(z, y);
    CHECK(dxy == dyx);
    CHECK(dxy >= 0.0);
    CHECK(dxy <= kPi + 1e-12);
    CHECK(dxy <= dxz + dzy + 1e-9);
    CHECK(std::isfinite(dxy));
  }
}

TEST_CASE("uniform SO(3) sampling matches the rotation-angle density") {
  auto qs = sample_orientations(SamplingScheme::uniform_so3(), 100000, 42);
  REQUIRE(qs.size() == 100000);

  // chi-squared test against p(theta) = (1 - cos(theta)) / pi over [0, pi],
  // 16 bins, dof 15, 0.99 quantile 30.578
  const int bins = 16;
  std::vector<double> counts(bins, 0.0);
  for (const auto& q : qs) {
    int b = static_cast<int>(q.rotation_angle() / kPi * bins);
    counts[std::min(b, bins - 1)] += 1.0;
  }
  auto cdf = [](double t) { return (t - std::sin(t)) / kPi; };
  double chi2 = 0;
  for (int b = 0; b < bins; ++b) {
    const double lo = kPi * b / bins, hi = kPi * (b + 1) / bins;
    const double expected = (cdf(hi) - cdf(lo)) * 100000.0;
    chi2 += (counts[b] - expected) * (counts[b] - expected) / expected;
  }
  CHECK(chi2 < 30.578);
}

TEST_CASE("sampling determinism and restrictions") {
  auto a = sample_orientations(SamplingScheme::uniform_so3(), 50, 9);
  auto b = sample_orientations(SamplingScheme::uniform_so3(), 50, 9);
  for (int i = 0; i < 50; ++i) CHECK(a[i].approx_equal(b[i], 0.0));

  auto single = sample_orientations(SamplingScheme::uniform_so3(), 1, 0);
  REQUIRE(single.size() == 1);

  auto euler_half = sample_orientations(SamplingScheme::uniform_euler(DirectionRange::half()), 300, 4);
  for (const auto& q : euler_half) CHECK(quat_to_euler_zyz(q).theta2 < 0.5 * kPi);

  auto so3_quarter = sample_orientations(SamplingScheme::uniform_so3(DirectionRange::quarter()), 300, 4);
  for (const auto& q : so3_quarter) {
    const auto e = quat_to_euler_zyz(q);
    CHECK(e.theta2 < 0.5 * kPi);
    CHECK(e.theta1 < kPi);
  }

  DirectionRange empty{0.5, 0.5, 0.0, kTwoPi};
  CHECK_THROWS_AS(sample_orientations(SamplingScheme::uniform_so3(empty), 10, 0),
                  std::invalid_argument);
}

TEST_CASE("pairwise distances of uniform SO(3) samples skew large") {
  auto qs = sample_orientations(SamplingScheme::uniform_so3(), 400, 17);
  const int bins = 16;
  std::vector<int> hist(bins, 0);
  for (std::size_t i = 0; i < qs.size(); ++i)
    for (std::size_t j = i + 1; j < qs.size(); ++j) {
      int b = static_cast<int>(quat_distance(qs[i], qs[j]) / kPi * bins);
      hist[std::min(b, bins - 1)]++;
    }
  int mode = 0;
  for (int b = 1; b < bins; ++b)
    if (hist[b] > hist[mode]) mode = b;
  const double mode_center = kPi * (mode + 0.5) / bins;
  CHECK(mode_center > 0.5 * kPi);
}

TEST_CASE("orientation CSV round trip") {
  auto qs = sample_orientations(SamplingScheme::uniform_so3(), 25, 23);
  const std::string path = "test_orientations.csv";
  save_orientations_csv(path, qs);
  auto back = load_orientations_csv(path);
  REQUIRE(back.size() == qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) CHECK(back[i].approx_equal(qs[i], 0.0));
  std::remove(path.c_str());

  CHECK_THROWS(load_orientations_csv("does_not_exist.csv"));
}
