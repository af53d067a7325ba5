#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "orient/alignment.hpp"

using namespace orient;

namespace {

std::vector<UnitQuaternion> transform_all(const Mat4& t, std::span<const UnitQuaternion> qs) {
  std::vector<UnitQuaternion> out;
  out.reserve(qs.size());
  for (const auto& q : qs) {
    auto y = t.apply(q.components());
    out.emplace_back(y[0], y[1], y[2], y[3]);
  }
  return out;
}

O4Transform random_transform(std::uint64_t seed, int m) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, kTwoPi);
  O4Transform t;
  for (auto& a : t.angles) a = u(rng);
  t.reflection = m;
  return t;
}

}  // namespace

TEST_CASE("o4_matrix structure") {
  O4Transform id;
  auto m = o4_matrix(id);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(m(r, c) == (r == c ? 1.0 : 0.0));

  O4Transform refl;
  refl.reflection = -1;
  auto mr = o4_matrix(refl);
  CHECK(mr(0, 0) == -1.0);
  CHECK(mr(1, 1) == 1.0);
  CHECK(mr.determinant() == doctest::Approx(-1.0));

  // orthogonality and determinant == m for random transforms
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_transform(1000 + trial, trial % 2 == 0 ? 1 : -1);
    auto tm = o4_matrix(t);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        double dot = 0;
        for (int k = 0; k < 4; ++k) dot += tm(k, r) * tm(k, c);
        CHECK(std::abs(dot - (r == c ? 1.0 : 0.0)) < 1e-8);
      }
    CHECK(std::abs(tm.determinant() - t.reflection) < 1e-8);
  }

  O4Transform bad;
  bad.reflection = 2;
  CHECK_THROWS_AS(o4_matrix(bad), std::invalid_argument);
  bad.reflection = 1;
  bad.angles[2] = -0.5;
  CHECK_THROWS_AS(o4_matrix(bad), std::invalid_argument);
}

TEST_CASE("e_or at a fixed transform") {
  auto truth = sample_orientations(SamplingScheme::uniform_so3(), 60, 4);
  O4Transform id;
  CHECK(e_or(truth, truth, id) == doctest::Approx(0.0));

  // sign flips are invisible through the antipodal quotient
  std::vector<UnitQuaternion> flipped;
  for (const auto& q : truth)
    flipped.emplace_back(-q.a(), -q.b(), -q.c(), -q.d());
  CHECK(e_or(truth, flipped, id) == doctest::Approx(0.0));

  // construct-and-invert: estimate = T0 * truth aligns exactly under T0^-1,
  // realized here by the transpose expressed through negated angles in
  // reversed order is unavailable in this chart, so verify via the defining
  // identity instead: e_or(truth, T0 truth, T) == 0 when T = T0^T as a matrix
  auto t0 = random_transform(77, 1);
  auto tm = o4_matrix(t0);
  auto moved = transform_all(tm, truth);
  // T0^T moves the estimates back onto the truth
  Mat4 tt;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) tt(r, c) = tm(c, r);
  auto back = transform_all(tt, moved);
  double mean = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) mean += quat_distance(truth[i], back[i]);
  // 2*acos(|s|) amplifies one ulp of rounding in s ~= 1 to ~3e-8, so 1e-7 is
  // the resolution floor of the metric itself
  CHECK(mean / static_cast<double>(truth.size()) < 1e-7);

  std::vector<UnitQuaternion> shorter(truth.begin(), truth.begin() + 10);
  CHECK_THROWS_AS(e_or(truth, shorter, id), std::invalid_argument);
}

TEST_CASE("e_or is invariant to jointly permuting the pairs") {
  auto truth = sample_orientations(SamplingScheme::uniform_so3(), 40, 6);
  auto estimate = sample_orientations(SamplingScheme::uniform_so3(), 40, 7);
  auto t = random_transform(3, -1);
  const double base = e_or(truth, estimate, t);

  std::vector<int> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(9);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<UnitQuaternion> pt, pe;
  for (int i : perm) {
    pt.push_back(truth[static_cast<std::size_t>(i)]);
    pe.push_back(estimate[static_cast<std::size_t>(i)]);
  }
  CHECK(e_or(pt, pe, t) == doctest::Approx(base));
}

TEST_CASE("align recovers itself and never loses to the identity") {
  auto truth = sample_orientations(SamplingScheme::uniform_so3(), 120, 10);
  AlignConfig cfg;
  cfg.seed = 5;
  auto self = align(truth, truth, cfg);
  CHECK(self.e_or < 1e-3);

  auto estimate = sample_orientations(SamplingScheme::uniform_so3(), 120, 11);
  auto r = align(truth, estimate, cfg);
  CHECK(r.e_or <= e_or(truth, estimate, O4Transform{}) + 1e-12);
  CHECK(r.restart_traces.size() == 6);
  CHECK(r.per_orientation_errors.size() == 120);
  double mean = 0;
  for (double e : r.per_orientation_errors) mean += e;
  CHECK(r.e_or == doctest::Approx(mean / 120.0));
}

TEST_CASE("align recovers a planted proper rotation") {
  auto truth = sample_orientations(SamplingScheme::uniform_so3(), 150, 13);
  auto t0 = random_transform(21, 1);
  auto estimate = transform_all(o4_matrix(t0), truth);
  AlignConfig cfg;
  cfg.seed = 2;
  auto r = align(truth, estimate, cfg);
  CHECK(r.e_or < 1e-2);
  CHECK(r.winning_reflection == 1);
}

TEST_CASE("align recovers a planted reflection") {
  auto truth = sample_orientations(SamplingScheme::uniform_so3(), 150, 14);
  Mat4 mirror;
  mirror(0, 0) = -1.0;
  auto estimate = transform_all(mirror, truth);
  AlignConfig cfg;
  cfg.seed = 3;
  auto r = align(truth, estimate, cfg);
  CHECK(r.e_or < 1e-2);
  CHECK(r.winning_reflection == -1);
}

TEST_CASE("alignment result JSON") {
  auto truth = sample_orientations(SamplingScheme::uniform_so3(), 30, 15);
  AlignConfig cfg;
  cfg.steps = 20;
  cfg.init_candidates = 8;
  auto r = align(truth, truth, cfg);
  auto j = alignment_result_json(r);
  CHECK(j.contains("e_or"));
  CHECK(j.at("m").get<int>() == r.transform.reflection);
  CHECK(j.at("angles").size() == 6);
  CHECK(j.at("per_orientation_errors_histogram").contains("counts"));
  CHECK(j.at("restart_traces").size() == 6);
}
