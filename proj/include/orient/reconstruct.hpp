#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "orient/geometry.hpp"
#include "orient/parallel.hpp"
#include "orient/projector.hpp"
#include "orient/volume.hpp"

namespace orient {

/// Adjoint of project(): smears every detector pixel back along its ray with
/// the same sampling geometry and trilinear weights, so the inner-product
/// identity <project(x), p> == <x, backproject(p)> holds to rounding.
inline VolumeGrid backproject(const ProjectionImage& p, const UnitQuaternion& q, int nx, int ny,
                              int nz, double voxel_size = 1.0) {
  VolumeGrid v(nx, ny, nz, voxel_size);
  const RotationMatrix3 rt = quat_to_matrix(q).transposed();
  const double cx = 0.5 * (nx - 1), cy = 0.5 * (ny - 1), cz = 0.5 * (nz - 1);
  const double cpr = 0.5 * (p.height - 1), cpc = 0.5 * (p.width - 1);
  const int half_steps = static_cast<int>(
      std::ceil(0.5 * std::sqrt(double(nx) * nx + double(ny) * ny + double(nz) * nz)));
  for (int r = 0; r < p.height; ++r) {
    const double y2 = (r - cpr);
    for (int c = 0; c < p.width; ++c) {
      const double value = p.at(r, c) * voxel_size;
      if (value == 0.0) continue;
      const double y1 = (c - cpc);
      for (int s = -half_steps; s <= half_steps; ++s) {
        const std::array<double, 3> det{y1, y2, static_cast<double>(s)};
        const auto w = rt.apply(det);
        const double x = w[0] + cx, y = w[1] + cy, z = w[2] + cz;
        const int i0 = static_cast<int>(std::floor(x));
        const int j0 = static_cast<int>(std::floor(y));
        const int k0 = static_cast<int>(std::floor(z));
        if (i0 < -1 || i0 >= nx || j0 < -1 || j0 >= ny || k0 < -1 || k0 >= nz) continue;
        const double fx = x - i0, fy = y - j0, fz = z - k0;
        for (int dk = 0; dk < 2; ++dk) {
          const int k = k0 + dk;
          if (k < 0 || k >= nz) continue;
          const double wz = dk ? fz : 1.0 - fz;
          for (int dj = 0; dj < 2; ++dj) {
            const int j = j0 + dj;
            if (j < 0 || j >= ny) continue;
            const double wy = dj ? fy : 1.0 - fy;
            for (int di = 0; di < 2; ++di) {
              const int i = i0 + di;
              if (i < 0 || i >= nx) continue;
              const double wx = di ? fx : 1.0 - fx;
              v.at(i, j, k) += value * wx * wy * wz;
            }
          }
        }
      }
    }
  }
  return v;
}

struct ReconstructionConfig {
  int iterations = 30;
  int grid_size = 32;
  double tikhonov = 0.0;
  int threads = 1;

  void validate() const {
    if (iterations < 1 || grid_size < 1)
      throw std::invalid_argument("ReconstructionConfig: iterations and grid_size must be >= 1");
    if (!(tikhonov >= 0.0))
      throw std::invalid_argument("ReconstructionConfig: tikhonov must be >= 0");
  }
};

struct CglsResult {
  VolumeGrid volume;
  std::vector<double> residual_norms;
};

namespace detail {

/// Forward operator over the whole stack geometry: out_i = project(x, q_i).
inline void stack_forward(const VolumeGrid& x, std::span<const UnitQuaternion> qs, int out_size,
                          int threads, std::vector<double>& out) {
  const std::size_t image_px = static_cast<std::size_t>(out_size) * out_size;
  out.assign(qs.size() * image_px, 0.0);
  parallel_for(static_cast<int>(qs.size()), threads, [&](int i, int) {
    const ProjectionImage p = project(x, qs[static_cast<std::size_t>(i)], out_size);
    std::copy(p.values.begin(), p.values.end(),
              out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * image_px));
  });
}

/// Adjoint over the whole stack; per-thread volume accumulators reduced in
/// worker order keep the result deterministic for a fixed thread count.
inline void stack_adjoint(std::span<const double> residual, std::span<const UnitQuaternion> qs,
                          int img_size, int grid, double voxel, int threads,
                          VolumeGrid& out) {
  const std::size_t image_px = static_cast<std::size_t>(img_size) * img_size;
  const int n_workers = std::max(1, std::min<int>(threads, static_cast<int>(qs.size())));
  std::vector<VolumeGrid> partial(static_cast<std::size_t>(n_workers));
  for (auto& v : partial) v = VolumeGrid(grid, grid, grid, voxel);
  parallel_for(static_cast<int>(qs.size()), n_workers, [&](int i, int worker) {
    ProjectionImage p(img_size, img_size, voxel);
    std::copy_n(residual.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * image_px),
                image_px, p.values.begin());
    const VolumeGrid bp = backproject(p, qs[static_cast<std::size_t>(i)], grid, grid, grid, voxel);
    auto& acc = partial[static_cast<std::size_t>(worker)];
    for (std::size_t t = 0; t < acc.values.size(); ++t) acc.values[t] += bp.values[t];
  });
  out = VolumeGrid(grid, grid, grid, voxel);
  for (const auto& v : partial)
    for (std::size_t t = 0; t < out.values.size(); ++t) out.values[t] += v.values[t];
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t t = 0; t < a.size(); ++t) s += a[t] * b[t];
  return s;
}

}  // namespace detail

/// Conjugate-gradient least squares on the stacked projector (optionally
/// Tikhonov-damped). The data residual norm is recorded per iteration and is
/// non-increasing in exact arithmetic.
inline CglsResult cgls_reconstruct(const ProjectionStack& stack,
                                   std::span<const UnitQuaternion> orientations,
                                   const ReconstructionConfig& config) {
  config.validate();
  if (stack.count != static_cast<int>(orientations.size()))
    throw std::invalid_argument("cgls_reconstruct: stack/orientation count mismatch");
  if (stack.height != stack.width)
    throw std::invalid_argument("cgls_reconstruct: expected square projections");
  const int threads = resolve_threads(config.threads);
  const int grid = config.grid_size;
  const double voxel = stack.pixel_size;
  const double eps = config.tikhonov;

  CglsResult result;
  result.volume = VolumeGrid(grid, grid, grid, voxel);
  VolumeGrid& x = result.volume;

  // r = b - A x0 = b
  std::vector<double> r(stack.values.begin(), stack.values.end());
  VolumeGrid s;
  detail::stack_adjoint(r, orientations, stack.height, grid, voxel, threads, s);
  std::vector<double> p = s.values;
  double gamma = detail::dot(s.values, s.values);
  std::vector<double> q;

  result.residual_norms.push_back(std::sqrt(detail::dot(r, r)));
  for (int it = 0; it < config.iterations; ++it) {
    if (gamma == 0.0) break;
    VolumeGrid pv(grid, grid, grid, voxel);
    pv.values = p;
    detail::stack_forward(pv, orientations, stack.height, threads, q);
    const double denom = detail::dot(q, q) + eps * detail::dot(p, p);
    if (denom == 0.0) break;
    const double alpha = gamma / denom;
    for (std::size_t t = 0; t < x.values.size(); ++t) x.values[t] += alpha * p[t];
    for (std::size_t t = 0; t < r.size(); ++t) r[t] -= alpha * q[t];
    detail::stack_adjoint(r, orientations, stack.height, grid, voxel, threads, s);
    if (eps > 0)
      for (std::size_t t = 0; t < s.values.size(); ++t) s.values[t] -= eps * x.values[t];
    const double gamma_next = detail::dot(s.values, s.values);
    const double beta = gamma_next / gamma;
    for (std::size_t t = 0; t < p.size(); ++t) p[t] = s.values[t] + beta * p[t];
    gamma = gamma_next;
    const double rn = std::sqrt(detail::dot(r, r));
    if (!std::isfinite(rn))
      throw std::runtime_error("cgls_reconstruct: diverged (non-finite residual)");
    result.residual_norms.push_back(rn);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Fourier shell correlation

struct FscCurve {
  std::vector<double> frequency;    // shell centers, cycles per length unit
  std::vector<double> correlation;  // in [-1, 1]
  double threshold = 0.5;
  std::optional<double> resolution;  // length units; empty when not reached

  void validate() const {
    for (std::size_t k = 1; k < frequency.size(); ++k)
      if (!(frequency[k] > frequency[k - 1]))
        throw std::invalid_argument("FscCurve: frequencies must increase strictly");
  }
};

namespace detail {

/// In-place 1D DFT along contiguous lines; radix-2 Cooley-Tukey when the
/// length is a power of two, O(n^2) evaluation otherwise (grids here are
/// small).
inline void dft_line(std::complex<double>* data, int n, std::vector<std::complex<double>>& scratch) {
  if ((n & (n - 1)) == 0) {
    // bit reversal
    for (int i = 1, j = 0; i < n; ++i) {
      int bit = n >> 1;
      for (; j & bit; bit >>= 1) j ^= bit;
      j ^= bit;
      if (i < j) std::swap(data[i], data[j]);
    }
    for (int len = 2; len <= n; len <<= 1) {
      const double ang = -2.0 * kPi / len;
      const std::complex<double> wl(std::cos(ang), std::sin(ang));
      for (int i = 0; i < n; i += len) {
        std::complex<double> w(1.0, 0.0);
        for (int j = 0; j < len / 2; ++j) {
          const auto u = data[i + j];
          const auto v = data[i + j + len / 2] * w;
          data[i + j] = u + v;
          data[i + j + len / 2] = u - v;
          w *= wl;
        }
      }
    }
    return;
  }
  scratch.assign(static_cast<std::size_t>(n), {0.0, 0.0});
  for (int k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (int t = 0; t < n; ++t) {
      const double ang = -2.0 * kPi * k * t / n;
      acc += data[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    scratch[static_cast<std::size_t>(k)] = acc;
  }
  std::copy(scratch.begin(), scratch.end(), data);
}

inline std::vector<std::complex<double>> dft3(const VolumeGrid& v) {
  const int nx = v.nx, ny = v.ny, nz = v.nz;
  std::vector<std::complex<double>> f(v.values.begin(), v.values.end());
  std::vector<std::complex<double>> line, scratch;
  // x lines are contiguous
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      dft_line(f.data() + (static_cast<std::size_t>(k) * ny + j) * nx, nx, scratch);
  // y lines
  line.resize(static_cast<std::size_t>(ny));
  for (int k = 0; k < nz; ++k)
    for (int i = 0; i < nx; ++i) {
      for (int j = 0; j < ny; ++j) line[static_cast<std::size_t>(j)] = f[(static_cast<std::size_t>(k) * ny + j) * nx + i];
      dft_line(line.data(), ny, scratch);
      for (int j = 0; j < ny; ++j) f[(static_cast<std::size_t>(k) * ny + j) * nx + i] = line[static_cast<std::size_t>(j)];
    }
  // z lines
  line.resize(static_cast<std::size_t>(nz));
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      for (int k = 0; k < nz; ++k) line[static_cast<std::size_t>(k)] = f[(static_cast<std::size_t>(k) * ny + j) * nx + i];
      dft_line(line.data(), nz, scratch);
      for (int k = 0; k < nz; ++k) f[(static_cast<std::size_t>(k) * ny + j) * nx + i] = line[static_cast<std::size_t>(k)];
    }
  return f;
}

inline double signed_frequency(int index, int n, double voxel) {
  const int s = index <= n / 2 ? index : index - n;
  return static_cast<double>(s) / (static_cast<double>(n) * voxel);
}

}  // namespace detail

/// Per-shell normalized cross-correlation of the two volumes' 3D Fourier
/// transforms; shells of width Nyquist/shells. Resolution is the first
/// crossing below the threshold (linear interpolation between shell centers).
inline FscCurve fsc(const VolumeGrid& xa, const VolumeGrid& xb, int shells,
                    double threshold = 0.5) {
  if (xa.nx != xb.nx || xa.ny != xb.ny || xa.nz != xb.nz)
    throw std::invalid_argument("fsc: volume dimensions differ");
  if (xa.voxel_size != xb.voxel_size)
    throw std::invalid_argument("fsc: voxel sizes differ");
  if (shells < 1) throw std::invalid_argument("fsc: shells must be >= 1");

  const auto fa = detail::dft3(xa);
  const auto fb = detail::dft3(xb);

  const double nyquist = 0.5 / xa.voxel_size;
  const double width = nyquist / shells;
  std::vector<double> cross(static_cast<std::size_t>(shells), 0.0);
  std::vector<double> pa(static_cast<std::size_t>(shells), 0.0);
  std::vector<double> pb(static_cast<std::size_t>(shells), 0.0);

  std::size_t t = 0;
  for (int k = 0; k < xa.nz; ++k) {
    const double fz = detail::signed_frequency(k, xa.nz, xa.voxel_size);
    for (int j = 0; j < xa.ny; ++j) {
      const double fy = detail::signed_frequency(j, xa.ny, xa.voxel_size);
      for (int i = 0; i < xa.nx; ++i, ++t) {
        const double fx = detail::signed_frequency(i, xa.nx, xa.voxel_size);
        const double f = std::sqrt(fx * fx + fy * fy + fz * fz);
        const int shell = static_cast<int>(f / width);
        if (shell >= shells) continue;
        cross[static_cast<std::size_t>(shell)] += (fa[t] * std::conj(fb[t])).real();
        pa[static_cast<std::size_t>(shell)] += std::norm(fa[t]);
        pb[static_cast<std::size_t>(shell)] += std::norm(fb[t]);
      }
    }
  }

  FscCurve curve;
  curve.threshold = threshold;
  for (int s = 0; s < shells; ++s) {
    curve.frequency.push_back((s + 0.5) * width);
    const double denom = std::sqrt(pa[static_cast<std::size_t>(s)] * pb[static_cast<std::size_t>(s)]);
    curve.correlation.push_back(denom > 0 ? cross[static_cast<std::size_t>(s)] / denom : 0.0);
  }

  for (int s = 1; s < shells; ++s) {
    const double c0 = curve.correlation[static_cast<std::size_t>(s - 1)];
    const double c1 = curve.correlation[static_cast<std::size_t>(s)];
    if (c0 >= threshold && c1 < threshold) {
      const double f0 = curve.frequency[static_cast<std::size_t>(s - 1)];
      const double f1 = curve.frequency[static_cast<std::size_t>(s)];
      const double fc = f0 + (c0 - threshold) / (c0 - c1) * (f1 - f0);
      curve.resolution = 1.0 / fc;
      break;
    }
  }
  return curve;
}

// FSC files: CSV `freq,fsc` + JSON summary.

inline void save_fsc_csv(const std::string& path, const FscCurve& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_fsc_csv: cannot open " + path);
  out << "freq,fsc\n";
  char buf[128];
  for (std::size_t k = 0; k < curve.frequency.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", curve.frequency[k], curve.correlation[k]);
    out << buf;
  }
  if (!out) throw std::runtime_error("save_fsc_csv: write failed for " + path);
}

inline nlohmann::json fsc_summary_json(const FscCurve& curve) {
  nlohmann::json j;
  j["threshold"] = curve.threshold;
  if (curve.resolution.has_value())
    j["resolution_at_threshold"] = *curve.resolution;
  else
    j["resolution_at_threshold"] = nullptr;
  return j;
}

}  // namespace orient
