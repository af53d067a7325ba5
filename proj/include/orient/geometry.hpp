#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "orient/random.hpp"

namespace orient {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

struct RotationMatrix3 {
  /// Row-major entries.
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double operator()(int r, int c) const { return m[static_cast<std::size_t>(r) * 3 + c]; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(r) * 3 + c]; }

  static RotationMatrix3 identity() { return {}; }

  RotationMatrix3 operator*(const RotationMatrix3& o) const {
    RotationMatrix3 out;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(r, k) * o(k, c);
        out(r, c) = s;
      }
    return out;
  }

  std::array<double, 3> apply(const std::array<double, 3>& v) const {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
  }

  RotationMatrix3 transposed() const {
    RotationMatrix3 out;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) out(r, c) = (*this)(c, r);
    return out;
  }

  double determinant() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) -
           m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
};

/// Orientation on the unit 3-sphere. Normalized on construction and kept in
/// canonical sign (a >= 0; if a == 0, the first nonzero of (b, c, d) >= 0) so
/// that the two antipodal representatives of one orientation compare equal.
class UnitQuaternion {
 public:
  UnitQuaternion() = default;

  UnitQuaternion(double a, double b, double c, double d) : a_(a), b_(b), c_(c), d_(d) {
    normalize();
    canonicalize();
  }

  static UnitQuaternion from_axis_angle(const std::array<double, 3>& axis, double theta) {
    const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    if (std::abs(n - 1.0) > 1e-9)
      throw std::invalid_argument("from_axis_angle: axis must be a unit vector");
    if (!(theta >= 0.0 && theta < kTwoPi))
      throw std::invalid_argument("from_axis_angle: theta must lie in [0, 2*pi)");
    const double h = 0.5 * theta;
    const double s = std::sin(h);
    return UnitQuaternion(std::cos(h), axis[0] * s, axis[1] * s, axis[2] * s);
  }

  double a() const { return a_; }
  double b() const { return b_; }
  double c() const { return c_; }
  double d() const { return d_; }

  std::array<double, 4> components() const { return {a_, b_, c_, d_}; }

  double dot(const UnitQuaternion& o) const {
    return a_ * o.a_ + b_ * o.b_ + c_ * o.c_ + d_ * o.d_;
  }

  /// Hamilton product.
  UnitQuaternion operator*(const UnitQuaternion& o) const {
    return UnitQuaternion(
        a_ * o.a_ - b_ * o.b_ - c_ * o.c_ - d_ * o.d_,
        a_ * o.b_ + b_ * o.a_ + c_ * o.d_ - d_ * o.c_,
        a_ * o.c_ - b_ * o.d_ + c_ * o.a_ + d_ * o.b_,
        a_ * o.d_ + b_ * o.c_ - c_ * o.b_ + d_ * o.a_);
  }

  UnitQuaternion conjugate() const { return UnitQuaternion(a_, -b_, -c_, -d_); }

  /// Magnitude of the rotation this quaternion encodes, in [0, pi].
  double rotation_angle() const { return 2.0 * std::acos(std::min(std::abs(a_), 1.0)); }

  bool approx_equal(const UnitQuaternion& o, double tol) const {
    return std::abs(a_ - o.a_) <= tol && std::abs(b_ - o.b_) <= tol &&
           std::abs(c_ - o.c_) <= tol && std::abs(d_ - o.d_) <= tol;
  }

 private:
  void normalize() {
    const double n = std::sqrt(a_ * a_ + b_ * b_ + c_ * c_ + d_ * d_);
    if (!(n > 1e-12) || !std::isfinite(n))
      throw std::invalid_argument("UnitQuaternion: degenerate (near-zero or non-finite) norm");
    if (std::abs(n - 1.0) < 1e-12) return;  // already unit: keep components bit-exact
    a_ /= n;
    b_ /= n;
    c_ /= n;
    d_ /= n;
  }

  void canonicalize() {
    const double comp[4] = {a_, b_, c_, d_};
    for (double v : comp) {
      if (v > 0.0) return;
      if (v < 0.0) {
        a_ = -a_;
        b_ = -b_;
        c_ = -c_;
        d_ = -d_;
        return;
      }
    }
  }

  double a_ = 1.0, b_ = 0.0, c_ = 0.0, d_ = 0.0;
};

inline RotationMatrix3 quat_to_matrix(const UnitQuaternion& q) {
  const double a = q.a(), b = q.b(), c = q.c(), d = q.d();
  RotationMatrix3 r;
  r.m = {a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c,
         2 * b * c + 2 * a * d, a * a - b * b + c * c - d * d, 2 * c * d - 2 * a * b,
         2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a - b * b - c * c + d * d};
  return r;
}

/// Geodesic distance between two orientations on SO(3), in [0, pi].
/// The inner product is clamped before acos so floating-point overshoot can
/// never produce a domain error.
inline double quat_distance(const UnitQuaternion& qi, const UnitQuaternion& qj) {
  const double s = std::clamp(qi.dot(qj), -1.0, 1.0);
  return 2.0 * std::acos(std::abs(s));
}

/// ZYZ Euler angles: the rotation is R_z(theta3) * R_y(theta2) * R_z(theta1).
struct EulerZYZ {
  double theta3 = 0.0;  // [0, 2*pi)
  double theta2 = 0.0;  // [0, pi]
  double theta1 = 0.0;  // [0, 2*pi)

  void validate() const {
    if (!(theta3 >= 0.0 && theta3 < kTwoPi))
      throw std::invalid_argument("EulerZYZ: theta3 out of [0, 2*pi)");
    if (!(theta2 >= 0.0 && theta2 <= kPi))
      throw std::invalid_argument("EulerZYZ: theta2 out of [0, pi]");
    if (!(theta1 >= 0.0 && theta1 < kTwoPi))
      throw std::invalid_argument("EulerZYZ: theta1 out of [0, 2*pi)");
  }
};

inline UnitQuaternion euler_zyz_to_quat(const EulerZYZ& e) {
  e.validate();
  const UnitQuaternion qz3(std::cos(0.5 * e.theta3), 0, 0, std::sin(0.5 * e.theta3));
  const UnitQuaternion qy2(std::cos(0.5 * e.theta2), 0, std::sin(0.5 * e.theta2), 0);
  const UnitQuaternion qz1(std::cos(0.5 * e.theta1), 0, 0, std::sin(0.5 * e.theta1));
  return qz3 * qy2 * qz1;
}

namespace detail {

inline double wrap_two_pi(double t) {
  t = std::fmod(t, kTwoPi);
  if (t < 0) t += kTwoPi;
  // fmod can round back up to 2*pi
  if (t >= kTwoPi) t = 0.0;
  return t;
}

}  // namespace detail

/// Inverse of euler_zyz_to_quat. At gimbal lock (theta2 in {0, pi}) theta3 is
/// reported as 0 and the full Z rotation folds into theta1.
inline EulerZYZ quat_to_euler_zyz(const UnitQuaternion& q) {
  const RotationMatrix3 r = quat_to_matrix(q);
  EulerZYZ e;
  const double r22 = std::clamp(r(2, 2), -1.0, 1.0);
  e.theta2 = std::acos(r22);
  const double s2 = std::sin(e.theta2);
  if (s2 > 1e-9) {
    e.theta3 = detail::wrap_two_pi(std::atan2(r(1, 2), r(0, 2)));
    e.theta1 = detail::wrap_two_pi(std::atan2(r(2, 1), -r(2, 0)));
  } else if (r22 > 0) {  // theta2 == 0: pure Z rotation by theta3 + theta1
    e.theta2 = 0.0;
    e.theta3 = 0.0;
    e.theta1 = detail::wrap_two_pi(std::atan2(r(1, 0), r(0, 0)));
  } else {  // theta2 == pi
    e.theta2 = kPi;
    e.theta3 = 0.0;
    e.theta1 = detail::wrap_two_pi(std::atan2(r(1, 0), r(1, 1)));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Orientation sampling

enum class SamplingKind { kUniformSo3, kUniformEuler };

/// Restriction of the projection direction (theta2, theta1) to a sub-range of
/// the sphere. The defaults cover the full sphere.
struct DirectionRange {
  double theta2_min = 0.0, theta2_max = kPi;
  double theta1_min = 0.0, theta1_max = kTwoPi;

  static DirectionRange full() { return {}; }
  /// Half the directions: theta2 in [0, pi/2), theta1 unrestricted.
  static DirectionRange half() { return {0.0, 0.5 * kPi, 0.0, kTwoPi}; }
  /// Quarter of the directions: theta2 in [0, pi/2), theta1 in [0, pi).
  static DirectionRange quarter() { return {0.0, 0.5 * kPi, 0.0, kPi}; }

  bool is_full() const {
    return theta2_min == 0.0 && theta2_max == kPi && theta1_min == 0.0 && theta1_max == kTwoPi;
  }

  bool contains(double theta2, double theta1) const {
    const bool t2_ok = theta2 >= theta2_min &&
                       (theta2 < theta2_max || (theta2_max == kPi && theta2 == kPi));
    const bool t1_ok = theta1 >= theta1_min && theta1 < theta1_max;
    return t2_ok && t1_ok;
  }

  void validate() const {
    if (!(theta2_min >= 0.0 && theta2_max <= kPi && theta2_min < theta2_max))
      throw std::invalid_argument("DirectionRange: theta2 range must be a nonempty subset of [0, pi]");
    if (!(theta1_min >= 0.0 && theta1_max <= kTwoPi && theta1_min < theta1_max))
      throw std::invalid_argument("DirectionRange: theta1 range must be a nonempty subset of [0, 2*pi)");
  }
};

struct SamplingScheme {
  SamplingKind kind = SamplingKind::kUniformSo3;
  DirectionRange directions{};

  static SamplingScheme uniform_so3(DirectionRange r = DirectionRange::full()) {
    return {SamplingKind::kUniformSo3, r};
  }
  static SamplingScheme uniform_euler(DirectionRange r = DirectionRange::full()) {
    return {SamplingKind::kUniformEuler, r};
  }
};

/// Draws `count` orientations. Uniform-SO(3) samples a 4D standard normal and
/// normalizes; uniform-Euler draws each angle uniformly in its (possibly
/// restricted) range. Direction restrictions on uniform-SO(3) are applied by
/// rejection.
inline std::vector<UnitQuaternion> sample_orientations(const SamplingScheme& scheme,
                                                       int count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("sample_orientations: count must be >= 1");
  scheme.directions.validate();
  std::mt19937_64 rng = make_rng(seed);
  std::vector<UnitQuaternion> out;
  out.reserve(static_cast<std::size_t>(count));

  if (scheme.kind == SamplingKind::kUniformSo3) {
    std::normal_distribution<double> normal(0.0, 1.0);
    const bool restricted = !scheme.directions.is_full();
    long long attempts = 0;
    const long long max_attempts = 4000000LL + 4000LL * count;
    while (static_cast<int>(out.size()) < count) {
      if (++attempts > max_attempts)
        throw std::runtime_error("sample_orientations: rejection cap hit; restriction too narrow");
      const double a = normal(rng), b = normal(rng), c = normal(rng), d = normal(rng);
      if (a == 0 && b == 0 && c == 0 && d == 0) continue;
      UnitQuaternion q(a, b, c, d);
      if (restricted) {
        const EulerZYZ e = quat_to_euler_zyz(q);
        if (!scheme.directions.contains(e.theta2, e.theta1)) continue;
      }
      out.push_back(q);
    }
  } else {
    const DirectionRange& r = scheme.directions;
    std::uniform_real_distribution<double> u3(0.0, kTwoPi);
    std::uniform_real_distribution<double> u2(r.theta2_min, r.theta2_max);
    std::uniform_real_distribution<double> u1(r.theta1_min, r.theta1_max);
    for (int i = 0; i < count; ++i) {
      EulerZYZ e{u3(rng), u2(rng), u1(rng)};
      out.push_back(euler_zyz_to_quat(e));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orientation files: CSV with header `index,a,b,c,d`, 17 significant digits.

inline void save_orientations_csv(const std::string& path,
                                  std::span<const UnitQuaternion> orientations) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_orientations_csv: cannot open " + path);
  out << "index,a,b,c,d\n";
  char buf[256];
  for (std::size_t i = 0; i < orientations.size(); ++i) {
    const auto& q = orientations[i];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", i, q.a(), q.b(), q.c(), q.d());
    out << buf;
  }
  if (!out) throw std::runtime_error("save_orientations_csv: write failed for " + path);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("bad numeric field '" + s + "' in " + context);
  }
}

inline long parse_long(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("bad integer field '" + s + "' in " + context);
  }
}

}  // namespace detail

inline std::vector<UnitQuaternion> load_orientations_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_orientations_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line).size() != 5)
    throw std::runtime_error("load_orientations_csv: missing/invalid header in " + path);
  std::vector<UnitQuaternion> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 5)
      throw std::runtime_error("load_orientations_csv: expected 5 fields in " + path);
    out.emplace_back(detail::parse_double(f[1], path), detail::parse_double(f[2], path),
                     detail::parse_double(f[3], path), detail::parse_double(f[4], path));
  }
  return out;
}

}  // namespace orient
