#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "orient/geometry.hpp"
#include "orient/random.hpp"

namespace orient {

struct Mat4 {
  std::array<double, 16> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};

  double operator()(int r, int c) const { return m[static_cast<std::size_t>(r) * 4 + c]; }
  double& operator()(int r, int c) { return m[static_cast<std::size_t>(r) * 4 + c]; }

  static Mat4 identity() { return {}; }

  Mat4 operator*(const Mat4& o) const {
    Mat4 out;
    out.m.fill(0.0);
    for (int r = 0; r < 4; ++r)
      for (int k = 0; k < 4; ++k) {
        const double a = (*this)(r, k);
        if (a == 0.0) continue;
        for (int c = 0; c < 4; ++c) out(r, c) += a * o(k, c);
      }
    return out;
  }

  std::array<double, 4> apply(const std::array<double, 4>& v) const {
    std::array<double, 4> out{};
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) out[static_cast<std::size_t>(r)] += (*this)(r, c) * v[static_cast<std::size_t>(c)];
    return out;
  }

  double determinant() const {
    // Laplace expansion over the first row
    auto minor3 = [&](int r0, int r1, int r2, int c0, int c1, int c2) {
      return (*this)(r0, c0) * ((*this)(r1, c1) * (*this)(r2, c2) - (*this)(r1, c2) * (*this)(r2, c1)) -
             (*this)(r0, c1) * ((*this)(r1, c0) * (*this)(r2, c2) - (*this)(r1, c2) * (*this)(r2, c0)) +
             (*this)(r0, c2) * ((*this)(r1, c0) * (*this)(r2, c1) - (*this)(r1, c1) * (*this)(r2, c0));
    };
    return (*this)(0, 0) * minor3(1, 2, 3, 1, 2, 3) - (*this)(0, 1) * minor3(1, 2, 3, 0, 2, 3) +
           (*this)(0, 2) * minor3(1, 2, 3, 0, 1, 3) - (*this)(0, 3) * minor3(1, 2, 3, 0, 1, 2);
  }
};

/// The six coordinate planes in ascending order: (1,2),(1,3),(1,4),(2,3),
/// (2,4),(3,4) with 1-based axes.
inline constexpr std::array<std::array<int, 2>, 6> kO4Planes{
    {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

/// Element of O(4) as diag(m,1,1,1) times the ordered product of six plane
/// rotations (left to right in kO4Planes order).
struct O4Transform {
  std::array<double, 6> angles{};
  int reflection = 1;  // +1 proper, -1 improper

  void validate() const {
    if (reflection != 1 && reflection != -1)
      throw std::invalid_argument("O4Transform: reflection must be +1 or -1");
    for (double a : angles)
      if (!(a >= 0.0 && a < kTwoPi))
        throw std::invalid_argument("O4Transform: angles must lie in [0, 2*pi)");
  }
};

namespace detail {

inline Mat4 plane_rotation(int axis_a, int axis_b, double angle) {
  Mat4 r;
  const double c = std::cos(angle), s = std::sin(angle);
  r(axis_a, axis_a) = c;
  r(axis_a, axis_b) = -s;
  r(axis_b, axis_a) = s;
  r(axis_b, axis_b) = c;
  return r;
}

/// d/dangle of plane_rotation: the active 2x2 block advanced by 90 degrees,
/// zero elsewhere (including the remaining diagonal).
inline Mat4 plane_rotation_derivative(int axis_a, int axis_b, double angle) {
  Mat4 r;
  r.m.fill(0.0);
  const double c = std::cos(angle), s = std::sin(angle);
  r(axis_a, axis_a) = -s;
  r(axis_a, axis_b) = -c;
  r(axis_b, axis_a) = c;
  r(axis_b, axis_b) = -s;
  return r;
}

inline Mat4 reflection_matrix(int m) {
  Mat4 r;
  r(0, 0) = static_cast<double>(m);
  return r;
}

}  // namespace detail

inline Mat4 o4_matrix(const O4Transform& t) {
  t.validate();
  Mat4 out = detail::reflection_matrix(t.reflection);
  for (std::size_t k = 0; k < 6; ++k)
    out = out * detail::plane_rotation(kO4Planes[k][0], kO4Planes[k][1], t.angles[k]);
  return out;
}

namespace detail {

inline double aligned_distance(const UnitQuaternion& truth, const Mat4& t,
                               const std::array<double, 4>& estimate) {
  auto y = t.apply(estimate);
  double norm = std::sqrt(y[0] * y[0] + y[1] * y[1] + y[2] * y[2] + y[3] * y[3]);
  if (norm <= 0) norm = 1.0;
  const auto q = truth.components();
  const double s =
      std::clamp((q[0] * y[0] + q[1] * y[1] + q[2] * y[2] + q[3] * y[3]) / norm, -1.0, 1.0);
  return 2.0 * std::acos(std::abs(s));
}

}  // namespace detail

/// Mean orientation error of `estimate` against `truth` after applying the
/// fixed transform t to every estimate (renormalized to absorb rounding).
inline double e_or(std::span<const UnitQuaternion> truth,
                   std::span<const UnitQuaternion> estimate, const O4Transform& t) {
  if (truth.size() != estimate.size() || truth.empty())
    throw std::invalid_argument("e_or: orientation lists must have equal nonzero length");
  const Mat4 tm = o4_matrix(t);
  double s = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    s += detail::aligned_distance(truth[i], tm, estimate[i].components());
  return s / static_cast<double>(truth.size());
}

struct AlignConfig {
  int steps = 300;
  int restarts_per_m = 3;
  double learning_rate = 0.5;
  double momentum = 0.5;
  double decay = 0.5;
  int decay_interval = 30;
  int batch_size = 256;
  /// Random angle tuples scored with one full e_or evaluation each; the best
  /// of them seed the non-identity restarts.
  int init_candidates = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 1 || restarts_per_m < 1 || batch_size < 1 || decay_interval < 1 ||
        init_candidates < restarts_per_m)
      throw std::invalid_argument("AlignConfig: counts must be positive");
    if (!(learning_rate > 0) || !(decay > 0) || !(decay <= 1) || momentum < 0 || momentum >= 1)
      throw std::invalid_argument("AlignConfig: bad optimizer constants");
  }
};

struct RestartTrace {
  int reflection = 1;
  int restart = 0;
  double best_e_or = 0.0;
  double final_e_or = 0.0;
  std::vector<double> e_or_trace;
};

struct AlignmentResult {
  O4Transform transform;
  double e_or = 0.0;
  std::vector<double> per_orientation_errors;
  int winning_reflection = 1;
  int winning_restart = 0;
  std::vector<RestartTrace> restart_traces;
};

/// Minimizes e_or over the six angles by momentum SGD, separately for the
/// proper (m = +1) and improper (m = -1) components of O(4); the best iterate
/// seen across all restarts wins. Restart 0 of each component starts from
/// zero angles, so the identity baseline is always part of the search.
inline AlignmentResult align(std::span<const UnitQuaternion> truth,
                             std::span<const UnitQuaternion> estimate,
                             const AlignConfig& config = {}) {
  config.validate();
  if (truth.size() != estimate.size() || truth.empty())
    throw std::invalid_argument("align: orientation lists must have equal nonzero length");
  const int n = static_cast<int>(truth.size());

  std::vector<std::array<double, 4>> est_raw(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) est_raw[static_cast<std::size_t>(i)] = estimate[i].components();

  constexpr double kClamp = 1.0 - 1e-7;

  auto full_e_or = [&](const Mat4& tm) {
    double s = 0;
    for (int i = 0; i < n; ++i)
      s += detail::aligned_distance(truth[i], tm, est_raw[static_cast<std::size_t>(i)]);
    return s / n;
  };

  AlignmentResult result;
  result.e_or = std::numeric_limits<double>::infinity();

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int m : {1, -1}) {
    // coarse scan: non-identity restarts descend from the most promising of
    // init_candidates random angle tuples
    std::vector<std::pair<double, std::array<double, 6>>> candidates;
    {
      std::mt19937_64 cand_rng = make_rng(config.seed, m == 1 ? 0xa11a : 0xa11b);
      std::uniform_real_distribution<double> u(0.0, kTwoPi);
      const Mat4 refl = detail::reflection_matrix(m);
      candidates.reserve(static_cast<std::size_t>(config.init_candidates));
      for (int k = 0; k < config.init_candidates; ++k) {
        std::array<double, 6> a;
        for (double& x : a) x = u(cand_rng);
        Mat4 tm = refl;
        for (std::size_t p = 0; p < 6; ++p)
          tm = tm * detail::plane_rotation(kO4Planes[p][0], kO4Planes[p][1], a[p]);
        candidates.emplace_back(full_e_or(tm), a);
      }
      std::sort(candidates.begin(), candidates.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
    }

    for (int restart = 0; restart < config.restarts_per_m; ++restart) {
      std::mt19937_64 rng =
          make_rng(config.seed, static_cast<std::uint64_t>(restart * 4 + (m == 1 ? 0 : 1)));
      std::array<double, 6> angles{};
      if (restart > 0) angles = candidates[static_cast<std::size_t>(restart - 1)].second;
      std::array<double, 6> velocity{};
      RestartTrace trace;
      trace.reflection = m;
      trace.restart = restart;
      trace.best_e_or = std::numeric_limits<double>::infinity();
      std::array<double, 6> best_angles = angles;

      std::size_t cursor = order.size();
      for (int step = 0; step <= config.steps; ++step) {
        // factor products once per step: prefix[k] = D * P_1..P_k
        std::array<Mat4, 7> prefix, suffix;
        std::array<Mat4, 6> planes;
        for (int k = 0; k < 6; ++k)
          planes[static_cast<std::size_t>(k)] = detail::plane_rotation(
              kO4Planes[static_cast<std::size_t>(k)][0], kO4Planes[static_cast<std::size_t>(k)][1],
              angles[static_cast<std::size_t>(k)]);
        prefix[0] = detail::reflection_matrix(m);
        for (int k = 0; k < 6; ++k) prefix[static_cast<std::size_t>(k) + 1] = prefix[static_cast<std::size_t>(k)] * planes[static_cast<std::size_t>(k)];
        suffix[6] = Mat4::identity();
        for (int k = 5; k >= 0; --k) suffix[static_cast<std::size_t>(k)] = planes[static_cast<std::size_t>(k)] * suffix[static_cast<std::size_t>(k) + 1];
        const Mat4& tm = prefix[6];

        const double current = full_e_or(tm);
        trace.e_or_trace.push_back(current);
        if (current < trace.best_e_or) {
          trace.best_e_or = current;
          best_angles = angles;
        }
        if (step == config.steps) break;

        std::array<Mat4, 6> dT;
        for (int k = 0; k < 6; ++k)
          dT[static_cast<std::size_t>(k)] =
              prefix[static_cast<std::size_t>(k)] *
              (detail::plane_rotation_derivative(kO4Planes[static_cast<std::size_t>(k)][0],
                                                 kO4Planes[static_cast<std::size_t>(k)][1],
                                                 angles[static_cast<std::size_t>(k)]) *
               suffix[static_cast<std::size_t>(k) + 1]);

        if (cursor >= order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        const std::size_t batch_end =
            std::min(order.size(), cursor + static_cast<std::size_t>(config.batch_size));
        std::array<double, 6> grad{};
        const double inv_batch = 1.0 / static_cast<double>(batch_end - cursor);
        for (std::size_t t = cursor; t < batch_end; ++t) {
          const int i = order[t];
          const auto q = truth[static_cast<std::size_t>(i)].components();
          const auto& e = est_raw[static_cast<std::size_t>(i)];
          const auto y = tm.apply(e);
          double s = 0;
          for (int c = 0; c < 4; ++c) s += q[static_cast<std::size_t>(c)] * y[static_cast<std::size_t>(c)];
          const double sc = std::clamp(s, -kClamp, kClamp);
          const double sign = sc >= 0 ? 1.0 : -1.0;
          const double factor = -2.0 * sign / std::sqrt(1.0 - sc * sc) * inv_batch;
          for (int k = 0; k < 6; ++k) {
            const auto dy = dT[static_cast<std::size_t>(k)].apply(e);
            double ds = 0;
            for (int c = 0; c < 4; ++c) ds += q[static_cast<std::size_t>(c)] * dy[static_cast<std::size_t>(c)];
            grad[static_cast<std::size_t>(k)] += factor * ds;
          }
        }
        cursor = batch_end;

        const double lr = config.learning_rate *
                          std::pow(config.decay, static_cast<double>(step / config.decay_interval));
        for (int k = 0; k < 6; ++k) {
          velocity[static_cast<std::size_t>(k)] =
              config.momentum * velocity[static_cast<std::size_t>(k)] - lr * grad[static_cast<std::size_t>(k)];
          angles[static_cast<std::size_t>(k)] += velocity[static_cast<std::size_t>(k)];
        }
      }

      trace.final_e_or = trace.e_or_trace.back();
      if (trace.best_e_or < result.e_or) {
        result.e_or = trace.best_e_or;
        O4Transform best;
        for (int k = 0; k < 6; ++k)
          best.angles[static_cast<std::size_t>(k)] = detail::wrap_two_pi(best_angles[static_cast<std::size_t>(k)]);
        best.reflection = m;
        result.transform = best;
        result.winning_reflection = m;
        result.winning_restart = restart;
      }
      result.restart_traces.push_back(std::move(trace));
    }
  }

  const Mat4 tm = o4_matrix(result.transform);
  result.per_orientation_errors.resize(static_cast<std::size_t>(n));
  double s = 0;
  for (int i = 0; i < n; ++i) {
    result.per_orientation_errors[static_cast<std::size_t>(i)] =
        detail::aligned_distance(truth[i], tm, est_raw[static_cast<std::size_t>(i)]);
    s += result.per_orientation_errors[static_cast<std::size_t>(i)];
  }
  result.e_or = s / n;
  return result;
}

/// Result JSON: {e_or, m, angles[6], per_orientation_errors_histogram,
/// restart_traces}.
inline nlohmann::json alignment_result_json(const AlignmentResult& r, int histogram_bins = 32) {
  nlohmann::json j;
  j["e_or"] = r.e_or;
  j["m"] = r.transform.reflection;
  j["angles"] = r.transform.angles;
  std::vector<int> counts(static_cast<std::size_t>(histogram_bins), 0);
  std::vector<double> edges(static_cast<std::size_t>(histogram_bins) + 1);
  for (int b = 0; b <= histogram_bins; ++b)
    edges[static_cast<std::size_t>(b)] = kPi * b / histogram_bins;
  for (double err : r.per_orientation_errors) {
    int b = static_cast<int>(err / kPi * histogram_bins);
    counts[static_cast<std::size_t>(std::min(std::max(b, 0), histogram_bins - 1))]++;
  }
  j["per_orientation_errors_histogram"] = {{"bin_edges", edges}, {"counts", counts}};
  j["restart_traces"] = nlohmann::json::array();
  for (const auto& t : r.restart_traces)
    j["restart_traces"].push_back({{"m", t.reflection},
                                   {"restart", t.restart},
                                   {"best_e_or", t.best_e_or},
                                   {"final_e_or", t.final_e_or},
                                   {"e_or_trace", t.e_or_trace}});
  return j;
}

}  // namespace orient
