#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "orient/dataset.hpp"
#include "orient/geometry.hpp"

namespace orient {

struct DistanceRecord {
  int i = 0, j = 0;
  double d = 0.0;
  double weight = 1.0;
};

/// Sparse or dense set of pairwise distance estimates over P nodes.
struct DistanceGraph {
  int node_count = 0;
  std::vector<DistanceRecord> records;

  void validate() const {
    std::unordered_set<std::uint64_t> seen;
    for (const auto& r : records) {
      if (!(r.i >= 0 && r.i < r.j && r.j < node_count))
        throw std::invalid_argument("DistanceGraph: record indices must satisfy 0 <= i < j < P");
      if (!(r.d >= 0.0) || !std::isfinite(r.d))
        throw std::invalid_argument("DistanceGraph: distances must be finite and >= 0");
      if (!seen.insert(detail::pair_key(r.i, r.j)).second)
        throw std::invalid_argument("DistanceGraph: duplicate record");
    }
  }

  bool connected() const {
    if (node_count <= 1) return true;
    std::vector<int> parent(static_cast<std::size_t>(node_count));
    for (int i = 0; i < node_count; ++i) parent[static_cast<std::size_t>(i)] = i;
    auto find = [&](int x) {
      while (parent[static_cast<std::size_t>(x)] != x) {
        parent[static_cast<std::size_t>(x)] =
            parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
        x = parent[static_cast<std::size_t>(x)];
      }
      return x;
    };
    int components = node_count;
    for (const auto& r : records) {
      const int a = find(r.i), b = find(r.j);
      if (a != b) {
        parent[static_cast<std::size_t>(a)] = b;
        --components;
      }
    }
    return components == 1;
  }
};

/// Exact d_q graph over the given pairs (all pairs when `pairs` is empty).
inline DistanceGraph exact_distance_graph(std::span<const UnitQuaternion> orientations,
                                          const PairSet& pairs = {}) {
  DistanceGraph g;
  g.node_count = static_cast<int>(orientations.size());
  if (pairs.empty()) {
    for (int i = 0; i < g.node_count; ++i)
      for (int j = i + 1; j < g.node_count; ++j)
        g.records.push_back({i, j, quat_distance(orientations[i], orientations[j]), 1.0});
  } else {
    for (const auto& p : pairs) {
      if (p.i < 0 || p.j >= g.node_count)
        throw std::invalid_argument("exact_distance_graph: pair index out of range");
      g.records.push_back({p.i, p.j, quat_distance(orientations[p.i], orientations[p.j]), 1.0});
    }
  }
  return g;
}

// Graph file: CSV `i,j,d`.

inline void save_graph_csv(const std::string& path, const DistanceGraph& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_graph_csv: cannot open " + path);
  out << "i,j,d\n";
  char buf[160];
  for (const auto& r : g.records) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", r.i, r.j, r.d);
    out << buf;
  }
  if (!out) throw std::runtime_error("save_graph_csv: write failed for " + path);
}

inline DistanceGraph load_graph_csv(const std::string& path, int node_count = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_graph_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line).size() != 3)
    throw std::runtime_error("load_graph_csv: missing/invalid header in " + path);
  DistanceGraph g;
  int max_index = -1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw std::runtime_error("load_graph_csv: expected 3 fields in " + path);
    DistanceRecord r;
    r.i = static_cast<int>(detail::parse_long(f[0], path));
    r.j = static_cast<int>(detail::parse_long(f[1], path));
    r.d = detail::parse_double(f[2], path);
    max_index = std::max(max_index, r.j);
    g.records.push_back(r);
  }
  g.node_count = node_count > 0 ? node_count : max_index + 1;
  g.validate();
  return g;
}

}  // namespace orient
