#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "orient/geometry.hpp"
#include "orient/parallel.hpp"
#include "orient/phantom.hpp"
#include "orient/random.hpp"
#include "orient/volume.hpp"

namespace orient {

/// Parallel-beam x-ray transform: line integrals through the volume rotated
/// by q, sampled on a detector of out_size x out_size pixels with
/// pixel_size == voxel_size. Rays step 1 voxel at a time with trilinear
/// interpolation. Depends on q only through its rotation matrix, so the two
/// antipodal representatives of an orientation project identically.
inline ProjectionImage project(const VolumeGrid& v, const UnitQuaternion& q, int out_size) {
  if (out_size < 1) throw std::invalid_argument("project: out_size must be >= 1");
  ProjectionImage p(out_size, out_size, v.voxel_size);
  const RotationMatrix3 rt = quat_to_matrix(q).transposed();
  const double cx = 0.5 * (v.nx - 1), cy = 0.5 * (v.ny - 1), cz = 0.5 * (v.nz - 1);
  const double cpix = 0.5 * (out_size - 1);
  const int half_steps = static_cast<int>(
      std::ceil(0.5 * std::sqrt(double(v.nx) * v.nx + double(v.ny) * v.ny + double(v.nz) * v.nz)));
  for (int r = 0; r < out_size; ++r) {
    const double y2 = (r - cpix);
    for (int c = 0; c < out_size; ++c) {
      const double y1 = (c - cpix);
      double acc = 0.0;
      for (int s = -half_steps; s <= half_steps; ++s) {
        const std::array<double, 3> det{y1, y2, static_cast<double>(s)};
        const auto w = rt.apply(det);
        acc += trilinear_sample(v, w[0] + cx, w[1] + cy, w[2] + cz);
      }
      p.at(r, c) = acc * v.voxel_size;
    }
  }
  return p;
}

/// Bilinear translation by t = (t1, t2) pixels (t1 along width, t2 along
/// height); regions shifted in from outside the frame are zero.
inline ProjectionImage apply_shift(const ProjectionImage& p, double t1, double t2) {
  ProjectionImage out(p.height, p.width, p.pixel_size);
  for (int r = 0; r < p.height; ++r) {
    const double src_r = r - t2;
    const int r0 = static_cast<int>(std::floor(src_r));
    const double fr = src_r - r0;
    for (int c = 0; c < p.width; ++c) {
      const double src_c = c - t1;
      const int c0 = static_cast<int>(std::floor(src_c));
      const double fc = src_c - c0;
      double acc = 0.0;
      for (int dr = 0; dr < 2; ++dr) {
        const int rr = r0 + dr;
        if (rr < 0 || rr >= p.height) continue;
        const double wr = dr ? fr : 1.0 - fr;
        for (int dc = 0; dc < 2; ++dc) {
          const int cc = c0 + dc;
          if (cc < 0 || cc >= p.width) continue;
          const double wc = dc ? fc : 1.0 - fc;
          acc += wr * wc * p.at(rr, cc);
        }
      }
      out.at(r, c) = acc;
    }
  }
  return out;
}

/// Adds i.i.d. Gaussian noise of the given variance to every pixel.
inline ProjectionImage add_noise(const ProjectionImage& p, double variance, std::uint64_t seed) {
  if (!(variance >= 0.0)) throw std::invalid_argument("add_noise: variance must be >= 0");
  ProjectionImage out = p;
  if (variance == 0.0) return out;
  std::mt19937_64 rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, std::sqrt(variance));
  for (double& x : out.values) x += noise(rng);
  return out;
}

/// Per-image measurement perturbations: shifts from a triangular distribution
/// with mean 0 and limit +-shift_limit pixels per axis, then white Gaussian
/// noise of variance noise_variance.
struct PerturbationSpec {
  double shift_limit = 0.0;
  double noise_variance = 0.0;

  void validate() const {
    if (!(shift_limit >= 0.0) || !std::isfinite(shift_limit))
      throw std::invalid_argument("PerturbationSpec: shift_limit must be finite and >= 0");
    if (!(noise_variance >= 0.0) || !std::isfinite(noise_variance))
      throw std::invalid_argument("PerturbationSpec: noise_variance must be finite and >= 0");
  }
};

struct GroundTruthRecord {
  UnitQuaternion orientation;
  double t1 = 0.0, t2 = 0.0;
  std::uint64_t noise_seed = 0;
};

struct SimulatedStack {
  ProjectionStack stack;
  std::vector<GroundTruthRecord> truth;
};

/// Simulates a measurement stack aligned index-for-index with `orientations`.
/// Per-image RNG streams are derived from (seed, image index), so serial and
/// parallel runs produce identical stacks.
inline SimulatedStack simulate_stack(const VolumeGrid& v,
                                     std::span<const UnitQuaternion> orientations,
                                     const PerturbationSpec& perturb, std::uint64_t seed,
                                     int out_size = 0, int threads = 1) {
  perturb.validate();
  if (out_size <= 0) out_size = v.nx;
  const int n = static_cast<int>(orientations.size());
  SimulatedStack result;
  result.stack = ProjectionStack(n, out_size, out_size, v.voxel_size);
  result.truth.resize(static_cast<std::size_t>(n));

  parallel_for(n, resolve_threads(threads), [&](int i, int) {
    GroundTruthRecord rec;
    rec.orientation = orientations[i];
    rec.noise_seed = mix_seed(seed, 2 * static_cast<std::uint64_t>(i) + 1);
    ProjectionImage p = project(v, orientations[i], out_size);
    if (perturb.shift_limit > 0.0) {
      std::mt19937_64 rng = make_rng(seed, 2 * static_cast<std::uint64_t>(i));
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      rec.t1 = perturb.shift_limit * (u01(rng) - u01(rng));
      rec.t2 = perturb.shift_limit * (u01(rng) - u01(rng));
      p = apply_shift(p, rec.t1, rec.t2);
    }
    if (perturb.noise_variance > 0.0) p = add_noise(p, perturb.noise_variance, rec.noise_seed);
    result.stack.set_image(i, p);
    result.truth[i] = rec;
  });
  return result;
}

// ---------------------------------------------------------------------------
// Ground-truth sidecar: CSV `index,a,b,c,d,t1,t2`.

inline void save_ground_truth_csv(const std::string& path,
                                  std::span<const GroundTruthRecord> truth) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_ground_truth_csv: cannot open " + path);
  out << "index,a,b,c,d,t1,t2\n";
  char buf[320];
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& q = truth[i].orientation;
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", i, q.a(), q.b(),
                  q.c(), q.d(), truth[i].t1, truth[i].t2);
    out << buf;
  }
  if (!out) throw std::runtime_error("save_ground_truth_csv: write failed for " + path);
}

inline std::vector<GroundTruthRecord> load_ground_truth_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_ground_truth_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line).size() != 7)
    throw std::runtime_error("load_ground_truth_csv: missing/invalid header in " + path);
  std::vector<GroundTruthRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 7)
      throw std::runtime_error("load_ground_truth_csv: expected 7 fields in " + path);
    GroundTruthRecord rec;
    rec.orientation =
        UnitQuaternion(detail::parse_double(f[1], path), detail::parse_double(f[2], path),
                       detail::parse_double(f[3], path), detail::parse_double(f[4], path));
    rec.t1 = detail::parse_double(f[5], path);
    rec.t2 = detail::parse_double(f[6], path);
    out.push_back(rec);
  }
  return out;
}

}  // namespace orient
