#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "orient/phantom.hpp"
#include "orient/reconstruct.hpp"

using namespace orient;

namespace {

double relative_l2(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("backproject is the adjoint of project") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  VolumeGrid x(16, 16, 16);
  for (double& v : x.values) v = n(rng);
  auto qs = sample_orientations(SamplingScheme::uniform_so3(), 5, 7);
  for (const auto& q : qs) {
    ProjectionImage p(16, 16);
    for (double& v : p.values) v = n(rng);
    auto ax = project(x, q, 16);
    auto atp = backproject(p, q, 16, 16, 16);
    double lhs = 0;
    for (std::size_t t = 0; t < ax.values.size(); ++t) lhs += ax.values[t] * p.values[t];
    double rhs = 0;
    for (std::size_t t = 0; t < x.values.size(); ++t) rhs += x.values[t] * atp.values[t];
    CHECK(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-30) <= 1e-4);
  }
}

TEST_CASE("backproject linearity and zero image") {
  auto q = sample_orientations(SamplingScheme::uniform_so3(), 1, 5)[0];
  ProjectionImage zero(12, 12);
  auto vz = backproject(zero, q, 12, 12, 12);
  for (double v : vz.values) CHECK(v == 0.0);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 1);
  ProjectionImage a(12, 12), b(12, 12), sum(12, 12);
  for (std::size_t t = 0; t < a.values.size(); ++t) {
    a.values[t] = n(rng);
    b.values[t] = n(rng);
    sum.values[t] = a.values[t] + b.values[t];
  }
  auto va = backproject(a, q, 12, 12, 12);
  auto vb = backproject(b, q, 12, 12, 12);
  auto vs = backproject(sum, q, 12, 12, 12);
  for (std::size_t t = 0; t < vs.values.size(); ++t)
    CHECK(std::abs(vs.values[t] - va.values[t] - vb.values[t]) < 1e-6);
}

TEST_CASE("CGLS recovers the phantom from clean projections") {
  auto truth_vol = make_phantom(PhantomKind::kAsymmetricBlobs, 16, 2);
  auto qs = sample_orientations(SamplingScheme::uniform_so3(), 60, 3);
  auto sim = simulate_stack(truth_vol, qs, PerturbationSpec{}, 1, 16, 2);

  ReconstructionConfig cfg;
  cfg.iterations = 25;
  cfg.grid_size = 16;
  cfg.threads = 2;
  auto rec = cgls_reconstruct(sim.stack, qs, cfg);

  CHECK(relative_l2(rec.volume.values, truth_vol.values) < 0.1);
  for (std::size_t k = 1; k < rec.residual_norms.size(); ++k)
    CHECK(rec.residual_norms[k] <= rec.residual_norms[k - 1] + 1e-9);

  // random orientations destroy the reconstruction
  auto wrong = sample_orientations(SamplingScheme::uniform_so3(), 60, 77);
  auto bad = cgls_reconstruct(sim.stack, wrong, cfg);
  CHECK(relative_l2(bad.volume.values, truth_vol.values) >
        2.0 * relative_l2(rec.volume.values, truth_vol.values));

  // zero stack reconstructs to zero
  ProjectionStack zeros(4, 16, 16);
  std::vector<UnitQuaternion> qz(qs.begin(), qs.begin() + 4);
  auto z = cgls_reconstruct(zeros, qz, cfg);
  for (double v : z.volume.values) CHECK(v == 0.0);

  CHECK_THROWS_AS(cgls_reconstruct(sim.stack, qz, cfg), std::invalid_argument);
}

TEST_CASE("FSC of a volume with itself is one") {
  auto v = make_phantom(PhantomKind::kBlobs, 24, 5);
  auto curve = fsc(v, v, 12);
  curve.validate();
  REQUIRE(curve.correlation.size() == 12);
  for (std::size_t s = 0; s < curve.correlation.size(); ++s)
    CHECK(std::abs(curve.correlation[s] - 1.0) < 1e-9);
  CHECK_FALSE(curve.resolution.has_value());

  // scale invariance
  auto scaled = v;
  for (double& x : scaled.values) x *= 3.7;
  auto c2 = fsc(v, scaled, 12);
  for (std::size_t s = 0; s < c2.correlation.size(); ++s)
    CHECK(std::abs(c2.correlation[s] - 1.0) < 1e-9);
}

TEST_CASE("independent noise volumes decorrelate") {
  VolumeGrid a(64, 64, 64), b(64, 64, 64);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  for (double& v : a.values) v = n(rng);
  for (double& v : b.values) v = n(rng);
  auto curve = fsc(a, b, 16);
  for (std::size_t s = 3; s < curve.correlation.size(); ++s)
    CHECK(std::abs(curve.correlation[s]) < 0.1);
}

TEST_CASE("fsc input validation and files") {
  VolumeGrid a(8, 8, 8), b(8, 8, 9);
  CHECK_THROWS_AS(fsc(a, b, 4), std::invalid_argument);

  auto v = make_phantom(PhantomKind::kShell, 16, 1);
  VolumeGrid noise(16, 16, 16);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0, 1);
  for (double& x : noise.values) x = nd(rng);
  VolumeGrid mix = v;
  for (std::size_t t = 0; t < mix.values.size(); ++t) mix.values[t] += 0.8 * noise.values[t];
  auto curve = fsc(v, mix, 8);
  save_fsc_csv("test_fsc.csv", curve);
  std::ifstream in("test_fsc.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "freq,fsc");
  std::remove("test_fsc.csv");

  auto j = fsc_summary_json(curve);
  CHECK(j.contains("resolution_at_threshold"));
}

TEST_CASE("non power of two DFT path agrees with the radix-2 path") {
  // 12-voxel grid exercises the O(n^2) line transform; the self-FSC identity
  // must hold there just as it does for powers of two
  VolumeGrid v(12, 12, 12);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0, 1);
  for (double& x : v.values) x = n(rng);
  auto curve = fsc(v, v, 6);
  for (std::size_t s = 0; s < curve.correlation.size(); ++s)
    CHECK(std::abs(curve.correlation[s] - 1.0) < 1e-9);
}
