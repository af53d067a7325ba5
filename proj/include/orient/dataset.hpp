#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "orient/geometry.hpp"
#include "orient/random.hpp"

namespace orient {

struct SplitSpec {
  double train = 0.50, val = 0.17, test = 0.33;
  std::uint64_t seed = 0;

  void validate() const {
    if (train < 0 || val < 0 || test < 0)
      throw std::invalid_argument("SplitSpec: fractions must be >= 0");
    if (std::abs(train + val + test - 1.0) > 1e-9)
      throw std::invalid_argument("SplitSpec: fractions must sum to 1");
  }
};

struct SplitResult {
  std::vector<int> train, val, test;
};

/// Deterministic shuffled split into three disjoint index sets covering
/// [0, count). A spec that leaves any subset empty is rejected.
inline SplitResult split(int count, const SplitSpec& spec) {
  spec.validate();
  if (count < 3) throw std::invalid_argument("split: count must be >= 3");
  std::vector<int> indices(static_cast<std::size_t>(count));
  std::iota(indices.begin(), indices.end(), 0);
  std::mt19937_64 rng = make_rng(spec.seed);
  std::shuffle(indices.begin(), indices.end(), rng);

  const int n_train = static_cast<int>(std::lround(spec.train * count));
  const int n_val = static_cast<int>(std::lround(spec.val * count));
  if (n_train <= 0 || n_val <= 0 || count - n_train - n_val <= 0)
    throw std::invalid_argument("split: degenerate spec leaves an empty subset");

  SplitResult out;
  out.train.assign(indices.begin(), indices.begin() + n_train);
  out.val.assign(indices.begin() + n_train, indices.begin() + n_train + n_val);
  out.test.assign(indices.begin() + n_train + n_val, indices.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

/// One projection pair (i < j); target is the orientation distance when
/// ground truth is available, NaN otherwise.
struct PairRecord {
  int i = 0, j = 0;
  double target = std::numeric_limits<double>::quiet_NaN();

  bool has_target() const { return !std::isnan(target); }
};

using PairSet = std::vector<PairRecord>;

namespace detail {

inline std::uint64_t pair_key(int i, int j) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(i)) << 32) |
         static_cast<std::uint32_t>(j);
}

}  // namespace detail

/// Stratified pair sampling that counters the large-distance skew of random
/// orientation pairs: candidate pairs are bucketed by d_q into `bins`
/// equal-width bins over [0, pi] and an equal quota is drawn per bin (bins
/// short of quota contribute all their members). Total drawn is approximately
/// fraction * |candidate pairs|.
inline PairSet make_uniform_pairs(std::span<const int> indices,
                                  std::span<const UnitQuaternion> orientations, double fraction,
                                  int bins, std::uint64_t seed) {
  if (indices.empty()) throw std::invalid_argument("make_uniform_pairs: empty index set");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("make_uniform_pairs: fraction must lie in (0, 1]");
  if (bins < 1) throw std::invalid_argument("make_uniform_pairs: bins must be >= 1");
  for (int idx : indices)
    if (idx < 0 || static_cast<std::size_t>(idx) >= orientations.size())
      throw std::invalid_argument("make_uniform_pairs: index out of range of orientations");

  const std::size_t n = indices.size();
  const double n_candidates = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  const long long total_target =
      std::max(1LL, static_cast<long long>(std::llround(fraction * n_candidates)));
  const long long quota =
      std::max(1LL, static_cast<long long>(std::llround(static_cast<double>(total_target) / bins)));

  std::mt19937_64 rng = make_rng(seed);
  auto bin_of = [&](double d) {
    int b = static_cast<int>(d / kPi * bins);
    return std::min(std::max(b, 0), bins - 1);
  };

  PairSet out;
  if (n_candidates <= 16e6) {
    // exact path: bucket every candidate pair, then draw per bin
    std::vector<std::vector<std::uint64_t>> buckets(static_cast<std::size_t>(bins));
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) {
        int i = indices[a], j = indices[b];
        if (i > j) std::swap(i, j);
        const double d = quat_distance(orientations[i], orientations[j]);
        buckets[static_cast<std::size_t>(bin_of(d))].push_back(detail::pair_key(i, j));
      }
    for (auto& bucket : buckets) {
      std::sort(bucket.begin(), bucket.end());  // enumeration-order independence
      std::shuffle(bucket.begin(), bucket.end(), rng);
      const std::size_t take = std::min<std::size_t>(bucket.size(), static_cast<std::size_t>(quota));
      for (std::size_t t = 0; t < take; ++t) {
        const int i = static_cast<int>(bucket[t] >> 32);
        const int j = static_cast<int>(bucket[t] & 0xffffffffu);
        out.push_back({i, j, quat_distance(orientations[i], orientations[j])});
      }
    }
  } else {
    // large-P path: rejection-sample pairs per bin instead of materializing
    // all O(P^2) candidates
    std::vector<long long> filled(static_cast<std::size_t>(bins), 0);
    std::unordered_set<std::uint64_t> taken;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    long long want = quota * bins;
    long long attempts = 0;
    const long long max_attempts = 200 * want;
    while (want > 0 && attempts < max_attempts) {
      ++attempts;
      const std::size_t a = pick(rng), b = pick(rng);
      if (a == b) continue;
      int i = indices[a], j = indices[b];
      if (i > j) std::swap(i, j);
      const double d = quat_distance(orientations[i], orientations[j]);
      const auto bin = static_cast<std::size_t>(bin_of(d));
      if (filled[bin] >= quota) continue;
      if (!taken.insert(detail::pair_key(i, j)).second) continue;
      filled[bin]++;
      want--;
      out.push_back({i, j, d});
    }
  }

  std::sort(out.begin(), out.end(), [](const PairRecord& a, const PairRecord& b) {
    return a.i != b.i ? a.i < b.i : a.j < b.j;
  });
  return out;
}

/// Shuffles the pair set and slices it into batches; the final short batch is
/// kept. The permutation depends on (seed, epoch) so successive epochs see
/// different orders over identical membership.
inline std::vector<PairSet> epoch_batches(const PairSet& pairs, int batch_size,
                                          std::uint64_t seed, int epoch = 0) {
  if (batch_size < 1) throw std::invalid_argument("epoch_batches: batch_size must be >= 1");
  PairSet shuffled = pairs;
  std::mt19937_64 rng = make_rng(seed, static_cast<std::uint64_t>(epoch));
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<PairSet> batches;
  for (std::size_t start = 0; start < shuffled.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(shuffled.size(), start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(shuffled.begin() + static_cast<std::ptrdiff_t>(start),
                         shuffled.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// PairSet file: CSV `i,j,d_target`, d_target blank when unlabeled.

inline void save_pairs_csv(const std::string& path, const PairSet& pairs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_pairs_csv: cannot open " + path);
  out << "i,j,d_target\n";
  char buf[160];
  for (const auto& p : pairs) {
    if (p.has_target())
      std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", p.i, p.j, p.target);
    else
      std::snprintf(buf, sizeof(buf), "%d,%d,\n", p.i, p.j);
    out << buf;
  }
  if (!out) throw std::runtime_error("save_pairs_csv: write failed for " + path);
}

inline PairSet load_pairs_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_pairs_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line).size() != 3)
    throw std::runtime_error("load_pairs_csv: missing/invalid header in " + path);
  PairSet out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw std::runtime_error("load_pairs_csv: expected 3 fields in " + path);
    PairRecord rec;
    rec.i = static_cast<int>(detail::parse_long(f[0], path));
    rec.j = static_cast<int>(detail::parse_long(f[1], path));
    rec.target = f[2].empty() ? std::numeric_limits<double>::quiet_NaN()
                              : detail::parse_double(f[2], path);
    out.push_back(rec);
  }
  return out;
}

}  // namespace orient
