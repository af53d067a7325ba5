#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace orient {

/// 3D scalar density on a regular voxel grid, x-index fastest.
struct VolumeGrid {
  int nx = 0, ny = 0, nz = 0;
  double voxel_size = 1.0;
  std::vector<double> values;

  VolumeGrid() = default;
  VolumeGrid(int nx_, int ny_, int nz_, double voxel = 1.0)
      : nx(nx_), ny(ny_), nz(nz_), voxel_size(voxel) {
    if (nx < 1 || ny < 1 || nz < 1)
      throw std::invalid_argument("VolumeGrid: all dimensions must be >= 1");
    values.assign(static_cast<std::size_t>(nx) * ny * nz, 0.0);
  }

  std::size_t size() const { return values.size(); }

  double& at(int i, int j, int k) {
    return values[(static_cast<std::size_t>(k) * ny + j) * nx + i];
  }
  double at(int i, int j, int k) const {
    return values[(static_cast<std::size_t>(k) * ny + j) * nx + i];
  }
};

/// Single 2D measurement, row-major.
struct ProjectionImage {
  int height = 0, width = 0;
  double pixel_size = 1.0;
  std::vector<double> values;

  ProjectionImage() = default;
  ProjectionImage(int h, int w, double pixel = 1.0) : height(h), width(w), pixel_size(pixel) {
    if (h < 1 || w < 1) throw std::invalid_argument("ProjectionImage: dimensions must be >= 1");
    values.assign(static_cast<std::size_t>(h) * w, 0.0);
  }

  std::size_t size() const { return values.size(); }

  double& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
};

/// Image-major collection of projections sharing one geometry.
struct ProjectionStack {
  int count = 0, height = 0, width = 0;
  double pixel_size = 1.0;
  std::vector<double> values;

  ProjectionStack() = default;
  ProjectionStack(int n, int h, int w, double pixel = 1.0)
      : count(n), height(h), width(w), pixel_size(pixel) {
    if (n < 0 || h < 1 || w < 1) throw std::invalid_argument("ProjectionStack: bad dimensions");
    values.assign(static_cast<std::size_t>(n) * h * w, 0.0);
  }

  std::size_t image_size() const { return static_cast<std::size_t>(height) * width; }

  std::span<double> image_view(int i) {
    return {values.data() + static_cast<std::size_t>(i) * image_size(), image_size()};
  }
  std::span<const double> image_view(int i) const {
    return {values.data() + static_cast<std::size_t>(i) * image_size(), image_size()};
  }

  ProjectionImage image(int i) const {
    if (i < 0 || i >= count) throw std::invalid_argument("ProjectionStack::image: index out of range");
    ProjectionImage p(height, width, pixel_size);
    auto v = image_view(i);
    std::copy(v.begin(), v.end(), p.values.begin());
    return p;
  }

  void set_image(int i, const ProjectionImage& p) {
    if (p.height != height || p.width != width)
      throw std::invalid_argument("ProjectionStack::set_image: shape mismatch");
    auto v = image_view(i);
    std::copy(p.values.begin(), p.values.end(), v.begin());
  }
};

// ---------------------------------------------------------------------------
// File formats: raw little-endian float32 raster + JSON sidecar. A base path
// "vol" stores to "vol.raw" and "vol.json".

namespace detail {

inline void write_f32_le(const std::string& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  std::vector<float> buf(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) buf[i] = static_cast<float>(values[i]);
  if constexpr (std::endian::native == std::endian::big) {
    for (float& f : buf) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = __builtin_bswap32(u);
      std::memcpy(&f, &u, 4);
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::vector<double> read_f32_le(const std::string& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<float> buf(expected);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(expected * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != expected * sizeof(float))
    throw std::runtime_error("raster too short: " + path);
  if constexpr (std::endian::native == std::endian::big) {
    for (float& f : buf) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = __builtin_bswap32(u);
      std::memcpy(&f, &u, 4);
    }
  }
  return {buf.begin(), buf.end()};
}

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw std::runtime_error("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

inline void save_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace detail

inline void save_volume(const std::string& base_path, const VolumeGrid& v) {
  detail::write_f32_le(base_path + ".raw", v.values);
  detail::save_json_file(base_path + ".json",
                         {{"nx", v.nx}, {"ny", v.ny}, {"nz", v.nz}, {"voxel_size", v.voxel_size}});
}

inline VolumeGrid load_volume(const std::string& base_path) {
  const auto j = detail::load_json_file(base_path + ".json");
  for (const auto& key : {"nx", "ny", "nz", "voxel_size"})
    if (!j.contains(key))
      throw std::runtime_error("volume sidecar " + base_path + ".json missing field: " + key);
  VolumeGrid v(j.at("nx").get<int>(), j.at("ny").get<int>(), j.at("nz").get<int>(),
               j.at("voxel_size").get<double>());
  v.values = detail::read_f32_le(base_path + ".raw", v.size());
  return v;
}

inline void save_stack(const std::string& base_path, const ProjectionStack& s) {
  detail::write_f32_le(base_path + ".raw", s.values);
  detail::save_json_file(base_path + ".json", {{"count", s.count},
                                               {"height", s.height},
                                               {"width", s.width},
                                               {"pixel_size", s.pixel_size}});
}

inline ProjectionStack load_stack(const std::string& base_path) {
  const auto j = detail::load_json_file(base_path + ".json");
  for (const auto& key : {"count", "height", "width", "pixel_size"})
    if (!j.contains(key))
      throw std::runtime_error("stack sidecar " + base_path + ".json missing field: " + key);
  ProjectionStack s(j.at("count").get<int>(), j.at("height").get<int>(),
                    j.at("width").get<int>(), j.at("pixel_size").get<double>());
  s.values = detail::read_f32_le(base_path + ".raw", s.values.size());
  return s;
}

}  // namespace orient
