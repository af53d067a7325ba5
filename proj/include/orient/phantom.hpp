#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "orient/geometry.hpp"
#include "orient/random.hpp"
#include "orient/volume.hpp"

namespace orient {

enum class PhantomKind { kBlobs, kShell, kAsymmetricBlobs };

namespace detail {

/// Smooth compactly-supported bump: (1 - (r/R)^2)^3 for r < R, else 0.
inline double bump(double r, double radius) {
  if (r >= radius) return 0.0;
  const double t = 1.0 - (r / radius) * (r / radius);
  return t * t * t;
}

struct Blob {
  std::array<double, 3> center;  // offsets from grid center, voxel units
  double radius;
  double amplitude;
};

inline void paint_blob(VolumeGrid& v, const Blob& blob) {
  const double cx = 0.5 * (v.nx - 1), cy = 0.5 * (v.ny - 1), cz = 0.5 * (v.nz - 1);
  const double bx = cx + blob.center[0], by = cy + blob.center[1], bz = cz + blob.center[2];
  const int i0 = std::max(0, static_cast<int>(std::floor(bx - blob.radius)));
  const int i1 = std::min(v.nx - 1, static_cast<int>(std::ceil(bx + blob.radius)));
  const int j0 = std::max(0, static_cast<int>(std::floor(by - blob.radius)));
  const int j1 = std::min(v.ny - 1, static_cast<int>(std::ceil(by + blob.radius)));
  const int k0 = std::max(0, static_cast<int>(std::floor(bz - blob.radius)));
  const int k1 = std::min(v.nz - 1, static_cast<int>(std::ceil(bz + blob.radius)));
  for (int k = k0; k <= k1; ++k)
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i) {
        const double dx = i - bx, dy = j - by, dz = k - bz;
        v.at(i, j, k) += blob.amplitude * bump(std::sqrt(dx * dx + dy * dy + dz * dz), blob.radius);
      }
}

/// Scales the volume so the axis-aligned z projection has unit RMS; noise
/// variances in PerturbationSpec are then directly comparable to signal power.
inline void normalize_projection_rms(VolumeGrid& v) {
  double sum_sq = 0.0;
  for (int j = 0; j < v.ny; ++j)
    for (int i = 0; i < v.nx; ++i) {
      double line = 0.0;
      for (int k = 0; k < v.nz; ++k) line += v.at(i, j, k);
      line *= v.voxel_size;
      sum_sq += line * line;
    }
  const double rms = std::sqrt(sum_sq / (static_cast<double>(v.nx) * v.ny));
  if (rms > 0) {
    for (double& x : v.values) x /= rms;
  }
}

inline std::array<double, 3> sample_in_ball(std::mt19937_64& rng, double radius) {
  std::uniform_real_distribution<double> u(-radius, radius);
  while (true) {
    std::array<double, 3> p{u(rng), u(rng), u(rng)};
    if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= radius * radius) return p;
  }
}

}  // namespace detail

/// Deterministic synthetic density on a cubic grid. All kinds keep their
/// support inside the centered ball of radius 0.4 * size so any rotation of
/// the volume stays clear of the boundary.
inline VolumeGrid make_phantom(PhantomKind kind, int size, std::uint64_t seed) {
  if (size < 8) throw std::invalid_argument("make_phantom: size must be >= 8");
  VolumeGrid v(size, size, size, 1.0);
  std::mt19937_64 rng = make_rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  switch (kind) {
    case PhantomKind::kBlobs: {
      for (int b = 0; b < 5; ++b) {
        detail::Blob blob;
        blob.center = detail::sample_in_ball(rng, 0.24 * size);
        blob.radius = (0.10 + 0.06 * u01(rng)) * size;
        blob.amplitude = 0.5 + 0.5 * u01(rng);
        detail::paint_blob(v, blob);
      }
      break;
    }
    case PhantomKind::kShell: {
      // wide profile: keeps trilinear resampling error of projections small
      const double r0 = 0.18 * size, w = 0.20 * size;
      const double cx = 0.5 * (size - 1);
      for (int k = 0; k < size; ++k)
        for (int j = 0; j < size; ++j)
          for (int i = 0; i < size; ++i) {
            const double dx = i - cx, dy = j - cx, dz = k - cx;
            const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
            v.at(i, j, k) = detail::bump(std::abs(r - r0), w);
          }
      break;
    }
    case PhantomKind::kAsymmetricBlobs: {
      // unequal sizes and amplitudes at scattered centers break every
      // nontrivial rotational self-symmetry
      std::vector<detail::Blob> blobs;
      const double min_sep = 0.08 * size;
      while (blobs.size() < 6) {
        detail::Blob blob;
        blob.center = detail::sample_in_ball(rng, 0.22 * size);
        bool ok = true;
        for (const auto& other : blobs) {
          const double dx = blob.center[0] - other.center[0];
          const double dy = blob.center[1] - other.center[1];
          const double dz = blob.center[2] - other.center[2];
          if (std::sqrt(dx * dx + dy * dy + dz * dz) < min_sep) ok = false;
        }
        if (!ok) continue;
        const auto idx = blobs.size();
        blob.radius = (0.09 + 0.012 * static_cast<double>(idx) + 0.01 * u01(rng)) * size;
        blob.amplitude = 0.5 + 0.12 * static_cast<double>(idx);
        blobs.push_back(blob);
      }
      for (const auto& blob : blobs) detail::paint_blob(v, blob);
      break;
    }
  }

  detail::normalize_projection_rms(v);
  return v;
}

/// Trilinear sample at fractional voxel coordinates; zero outside the grid.
inline double trilinear_sample(const VolumeGrid& v, double x, double y, double z) {
  const int i0 = static_cast<int>(std::floor(x));
  const int j0 = static_cast<int>(std::floor(y));
  const int k0 = static_cast<int>(std::floor(z));
  if (i0 < -1 || i0 >= v.nx || j0 < -1 || j0 >= v.ny || k0 < -1 || k0 >= v.nz) return 0.0;
  const double fx = x - i0, fy = y - j0, fz = z - k0;
  double acc = 0.0;
  for (int dk = 0; dk < 2; ++dk) {
    const int k = k0 + dk;
    if (k < 0 || k >= v.nz) continue;
    const double wz = dk ? fz : 1.0 - fz;
    for (int dj = 0; dj < 2; ++dj) {
      const int j = j0 + dj;
      if (j < 0 || j >= v.ny) continue;
      const double wy = dj ? fy : 1.0 - fy;
      for (int di = 0; di < 2; ++di) {
        const int i = i0 + di;
        if (i < 0 || i >= v.nx) continue;
        const double wx = di ? fx : 1.0 - fx;
        acc += wx * wy * wz * v.at(i, j, k);
      }
    }
  }
  return acc;
}

/// Resamples the volume rotated by q (density transported by R_q).
inline VolumeGrid rotate_volume(const VolumeGrid& v, const UnitQuaternion& q) {
  VolumeGrid out(v.nx, v.ny, v.nz, v.voxel_size);
  const RotationMatrix3 rt = quat_to_matrix(q).transposed();
  const double cx = 0.5 * (v.nx - 1), cy = 0.5 * (v.ny - 1), cz = 0.5 * (v.nz - 1);
  for (int k = 0; k < v.nz; ++k)
    for (int j = 0; j < v.ny; ++j)
      for (int i = 0; i < v.nx; ++i) {
        const std::array<double, 3> p{i - cx, j - cy, k - cz};
        const auto w = rt.apply(p);
        out.at(i, j, k) = trilinear_sample(v, w[0] + cx, w[1] + cy, w[2] + cz);
      }
  return out;
}

}  // namespace orient
