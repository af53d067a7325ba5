#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "orient/dataset.hpp"
#include "orient/graph.hpp"
#include "orient/network.hpp"
#include "orient/parallel.hpp"
#include "orient/projector.hpp"
#include "orient/volume.hpp"

namespace orient {

/// Pixelwise L2 distance between two projections of identical shape.
inline double euclidean_distance(const ProjectionImage& pi, const ProjectionImage& pj) {
  if (pi.height != pj.height || pi.width != pj.width)
    throw std::invalid_argument("euclidean_distance: shape mismatch");
  double s = 0;
  for (std::size_t t = 0; t < pi.values.size(); ++t) {
    const double d = pi.values[t] - pj.values[t];
    s += d * d;
  }
  return std::sqrt(s);
}

enum class FeatureDistanceKind { kCosine, kEuclidean };

/// Distance between feature vectors. Cosine kind returns
/// 2*acos(<fi, fj> / (|fi| |fj|)) in [0, 2*pi] with the normalized inner
/// product clamped to [-1, 1]; Euclidean kind returns |fi - fj|.
inline double feature_distance(std::span<const double> fi, std::span<const double> fj,
                               FeatureDistanceKind kind) {
  if (fi.size() != fj.size() || fi.empty())
    throw std::invalid_argument("feature_distance: dimension mismatch");
  if (kind == FeatureDistanceKind::kEuclidean) {
    double s = 0;
    for (std::size_t t = 0; t < fi.size(); ++t) s += (fi[t] - fj[t]) * (fi[t] - fj[t]);
    return std::sqrt(s);
  }
  double dot = 0, ni = 0, nj = 0;
  for (std::size_t t = 0; t < fi.size(); ++t) {
    dot += fi[t] * fj[t];
    ni += fi[t] * fi[t];
    nj += fj[t] * fj[t];
  }
  ni = std::sqrt(ni);
  nj = std::sqrt(nj);
  if (ni < 1e-300 || nj < 1e-300)
    throw std::domain_error("feature_distance: zero vector with cosine kind");
  return 2.0 * std::acos(std::clamp(dot / (ni * nj), -1.0, 1.0));
}

/// Pairwise distance estimator: either the Euclidean pixel baseline or a
/// Siamese embedding compared with a feature distance. Symmetric in its two
/// arguments by construction.
class DistanceEstimator {
 public:
  static DistanceEstimator euclidean_baseline() {
    DistanceEstimator e;
    e.siamese_ = false;
    return e;
  }

  static DistanceEstimator siamese(EmbeddingNet net,
                                   FeatureDistanceKind kind = FeatureDistanceKind::kCosine) {
    DistanceEstimator e;
    e.siamese_ = true;
    e.net_ = std::move(net);
    e.feature_kind_ = kind;
    return e;
  }

  bool is_siamese() const { return siamese_; }
  const EmbeddingNet& net() const { return net_; }
  FeatureDistanceKind feature_kind() const { return feature_kind_; }

  double estimate(const ProjectionImage& pi, const ProjectionImage& pj) const {
    if (!siamese_) return euclidean_distance(pi, pj);
    return feature_distance(embed(net_, pi), embed(net_, pj), feature_kind_);
  }

 private:
  bool siamese_ = false;
  EmbeddingNet net_;
  FeatureDistanceKind feature_kind_ = FeatureDistanceKind::kCosine;
};

namespace detail {

/// Inset clamp used on the differentiable path so gradients of the cosine
/// distance stay bounded as features approach collinearity.
inline constexpr double kCosineClamp = 1.0 - 1e-7;

struct PairDistanceGrad {
  double value = 0.0;
  bool clamped = false;  // cosine argument outside the inset range: zero grad
};

/// d and, when requested, its gradients w.r.t. both feature vectors.
inline PairDistanceGrad feature_distance_with_grad(std::span<const double> fi,
                                                   std::span<const double> fj,
                                                   FeatureDistanceKind kind,
                                                   std::span<double> d_fi,
                                                   std::span<double> d_fj) {
  PairDistanceGrad out;
  const std::size_t n = fi.size();
  if (kind == FeatureDistanceKind::kEuclidean) {
    double s = 0;
    for (std::size_t t = 0; t < n; ++t) s += (fi[t] - fj[t]) * (fi[t] - fj[t]);
    const double d = std::sqrt(s);
    out.value = d;
    const double inv = d > 1e-12 ? 1.0 / d : 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double g = (fi[t] - fj[t]) * inv;
      d_fi[t] = g;
      d_fj[t] = -g;
    }
    return out;
  }
  double dot = 0, nis = 0, njs = 0;
  for (std::size_t t = 0; t < n; ++t) {
    dot += fi[t] * fj[t];
    nis += fi[t] * fi[t];
    njs += fj[t] * fj[t];
  }
  const double ni = std::sqrt(nis), nj = std::sqrt(njs);
  if (ni < 1e-300 || nj < 1e-300)
    throw std::domain_error("feature_distance: zero vector with cosine kind");
  const double c_raw = dot / (ni * nj);
  const double c = std::clamp(c_raw, -kCosineClamp, kCosineClamp);
  out.value = 2.0 * std::acos(c);
  out.clamped = c_raw != c;
  if (out.clamped) {
    std::fill(d_fi.begin(), d_fi.end(), 0.0);
    std::fill(d_fj.begin(), d_fj.end(), 0.0);
    return out;
  }
  const double dacos = -2.0 / std::sqrt(1.0 - c * c);
  const double inv_ninj = 1.0 / (ni * nj);
  for (std::size_t t = 0; t < n; ++t) {
    d_fi[t] = dacos * (fj[t] * inv_ninj - c * fi[t] / nis);
    d_fj[t] = dacos * (fi[t] * inv_ninj - c * fj[t] / njs);
  }
  return out;
}

}  // namespace detail

/// Mean squared residual of the estimator against pair targets; the mean
/// (rather than the paper-style sum) keeps values batch-size independent.
inline double loss_de(const DistanceEstimator& estimator, const ProjectionStack& stack,
                      const PairSet& batch) {
  if (batch.empty()) return 0.0;
  double s = 0;
  for (const auto& p : batch) {
    if (p.i < 0 || p.j >= stack.count)
      throw std::invalid_argument("loss_de: pair index out of range");
    if (!p.has_target()) throw std::invalid_argument("loss_de: pair without target");
    const double r = estimator.estimate(stack.image(p.i), stack.image(p.j)) - p.target;
    s += r * r;
  }
  return s / static_cast<double>(batch.size());
}

enum class OptimizerKind { kRmsProp, kSgd };

struct TrainConfig {
  int epochs = 150;
  int batch_size = 256;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kRmsProp;
  /// When positive, training shifts every projection by a fresh triangular
  /// draw (limit +-augment_shift_limit pixels per axis) each epoch. Unlike
  /// per-image shifts baked into a simulated stack, resampling across epochs
  /// actually rewards shift-invariant features. Validation always sees the
  /// unaugmented stack.
  double augment_shift_limit = 0.0;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    if (!(augment_shift_limit >= 0))
      throw std::invalid_argument("TrainConfig: augment_shift_limit must be >= 0");
  }
};

/// Per-epoch loss history; entry 0 is the pre-training evaluation.
struct TrainHistory {
  std::vector<double> train_lde;
  std::vector<double> val_lde;
};

class TrainingDivergedError : public std::runtime_error {
 public:
  TrainingDivergedError(int epoch_index, const std::string& what_arg)
      : std::runtime_error(what_arg), epoch(epoch_index) {}
  int epoch;
};

namespace detail {

/// Shared scratch for batched Siamese passes: one forward workspace per
/// unique image in the batch.
struct BatchWorkspaces {
  std::vector<ForwardWorkspace> forward;
  std::vector<std::vector<double>> d_features;
  std::vector<GradientBuffer> thread_grads;
};

inline double siamese_batch_pass(EmbeddingNet& net, const ProjectionStack& stack,
                                 const PairSet& batch, FeatureDistanceKind kind, int threads,
                                 BatchWorkspaces& ws, GradientBuffer* total_grads) {
  // collapse the batch onto its unique images: one forward (and at most one
  // backward) per image regardless of how many pairs touch it
  std::unordered_map<int, int> slot_of;
  std::vector<int> slot_index;
  for (const auto& p : batch) {
    if (p.i < 0 || p.j >= stack.count || p.i >= p.j)
      throw std::invalid_argument("train: pair index out of range");
    for (int idx : {p.i, p.j})
      if (slot_of.emplace(idx, static_cast<int>(slot_index.size())).second)
        slot_index.push_back(idx);
  }
  const int n_slots = static_cast<int>(slot_index.size());
  if (ws.forward.size() < static_cast<std::size_t>(n_slots)) {
    ws.forward.resize(static_cast<std::size_t>(n_slots));
    ws.d_features.resize(static_cast<std::size_t>(n_slots));
  }

  parallel_for(n_slots, threads, [&](int s, int) {
    embed_forward(net, stack.image(slot_index[static_cast<std::size_t>(s)]),
                  ws.forward[static_cast<std::size_t>(s)]);
  });

  const int n_f = net.arch.feature_dim();
  for (int s = 0; s < n_slots; ++s)
    ws.d_features[static_cast<std::size_t>(s)].assign(static_cast<std::size_t>(n_f), 0.0);

  // residuals and per-feature gradients (cheap, serial)
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  std::vector<double> gi(static_cast<std::size_t>(n_f)), gj(static_cast<std::size_t>(n_f));
  double loss = 0;
  for (const auto& p : batch) {
    if (!p.has_target()) throw std::invalid_argument("train: pair without target");
    const int si = slot_of[p.i], sj = slot_of[p.j];
    const auto& fi = ws.forward[static_cast<std::size_t>(si)].features;
    const auto& fj = ws.forward[static_cast<std::size_t>(sj)].features;
    const auto dg = feature_distance_with_grad(fi, fj, kind, gi, gj);
    const double r = dg.value - p.target;
    loss += r * r * inv_batch;
    if (total_grads != nullptr) {
      const double scale = 2.0 * r * inv_batch;
      auto& dfi = ws.d_features[static_cast<std::size_t>(si)];
      auto& dfj = ws.d_features[static_cast<std::size_t>(sj)];
      for (int t = 0; t < n_f; ++t) {
        dfi[static_cast<std::size_t>(t)] += scale * gi[static_cast<std::size_t>(t)];
        dfj[static_cast<std::size_t>(t)] += scale * gj[static_cast<std::size_t>(t)];
      }
    }
  }

  if (total_grads != nullptr) {
    const int n_threads = std::max(1, std::min(threads, n_slots));
    if (ws.thread_grads.size() < static_cast<std::size_t>(n_threads))
      ws.thread_grads.resize(static_cast<std::size_t>(n_threads));
    for (int w = 0; w < n_threads; ++w) {
      if (ws.thread_grads[static_cast<std::size_t>(w)].weights.empty())
        ws.thread_grads[static_cast<std::size_t>(w)].init_like(net);
      else
        ws.thread_grads[static_cast<std::size_t>(w)].clear();
    }
    parallel_for(n_slots, n_threads, [&](int s, int worker) {
      embed_backward(net, ws.forward[static_cast<std::size_t>(s)],
                     ws.d_features[static_cast<std::size_t>(s)],
                     ws.thread_grads[static_cast<std::size_t>(worker)]);
    });
    for (int w = 0; w < n_threads; ++w) total_grads->add(ws.thread_grads[static_cast<std::size_t>(w)]);
  }
  return loss;
}

}  // namespace detail

/// Batch-mean L_DE along the differentiable path (inset cosine clamp), with
/// parameter gradients accumulated into `grads` (must be init_like'd).
inline double siamese_loss_and_gradient(EmbeddingNet& net, const ProjectionStack& stack,
                                        const PairSet& batch, FeatureDistanceKind kind,
                                        GradientBuffer& grads, int threads = 1) {
  detail::BatchWorkspaces ws;
  grads.clear();
  return detail::siamese_batch_pass(net, stack, batch, kind, resolve_threads(threads), ws, &grads);
}

/// Batch-mean L_DE along the differentiable path, no gradients.
inline double siamese_loss(EmbeddingNet& net, const ProjectionStack& stack, const PairSet& batch,
                           FeatureDistanceKind kind, int threads = 1) {
  detail::BatchWorkspaces ws;
  return detail::siamese_batch_pass(net, stack, batch, kind, resolve_threads(threads), ws, nullptr);
}

/// Full-set L_DE of a Siamese net, embedding each distinct image once.
inline double evaluate_lde(const EmbeddingNet& net, const ProjectionStack& stack,
                           const PairSet& pairs, FeatureDistanceKind kind, int threads = 1) {
  if (pairs.empty()) return 0.0;
  std::unordered_map<int, int> slot_of;
  std::vector<int> slot_index;
  for (const auto& p : pairs) {
    for (int idx : {p.i, p.j})
      if (slot_of.emplace(idx, static_cast<int>(slot_index.size())).second)
        slot_index.push_back(idx);
  }
  std::vector<std::vector<double>> features(slot_index.size());
  parallel_for(static_cast<int>(slot_index.size()), resolve_threads(threads), [&](int s, int) {
    features[static_cast<std::size_t>(s)] =
        embed(net, stack.image(slot_index[static_cast<std::size_t>(s)]));
  });
  double loss = 0;
  for (const auto& p : pairs) {
    const double d = feature_distance(features[static_cast<std::size_t>(slot_of[p.i])],
                                      features[static_cast<std::size_t>(slot_of[p.j])], kind);
    const double r = d - p.target;
    loss += r * r;
  }
  return loss / static_cast<double>(pairs.size());
}

/// Trains the embedding net against d_q targets with mini-batch SGD. Returns
/// per-epoch train/validation losses with entry 0 holding the pre-training
/// evaluation. Throws TrainingDivergedError (with the epoch index) if the
/// loss stops being finite.
inline TrainHistory train(EmbeddingNet& net, const ProjectionStack& stack,
                          const PairSet& train_pairs, const PairSet& val_pairs,
                          FeatureDistanceKind kind, const TrainConfig& config) {
  config.validate();
  if (train_pairs.empty()) throw std::invalid_argument("train: no training pairs");
  const int threads = resolve_threads(config.threads);

  TrainHistory history;
  history.train_lde.push_back(evaluate_lde(net, stack, train_pairs, kind, threads));
  history.val_lde.push_back(evaluate_lde(net, stack, val_pairs, kind, threads));

  GradientBuffer grads;
  grads.init_like(net);
  GradientBuffer sq_avg;  // RMSProp squared-gradient moving average
  sq_avg.init_like(net);
  detail::BatchWorkspaces ws;

  constexpr double kDecay = 0.9;
  constexpr double kEps = 1e-7;

  ProjectionStack augmented;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const ProjectionStack* epoch_stack = &stack;
    if (config.augment_shift_limit > 0.0) {
      augmented = stack;
      parallel_for(stack.count, threads, [&](int i, int) {
        std::mt19937_64 rng =
            make_rng(mix_seed(config.seed, 0xa06 + static_cast<std::uint64_t>(epoch)),
                     static_cast<std::uint64_t>(i));
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        const double t1 = config.augment_shift_limit * (u01(rng) - u01(rng));
        const double t2 = config.augment_shift_limit * (u01(rng) - u01(rng));
        augmented.set_image(i, apply_shift(stack.image(i), t1, t2));
      });
      epoch_stack = &augmented;
    }
    auto batches = epoch_batches(train_pairs, config.batch_size, config.seed, epoch);
    double epoch_loss = 0;
    for (const auto& batch : batches) {
      grads.clear();
      const double batch_loss =
          detail::siamese_batch_pass(net, *epoch_stack, batch, kind, threads, ws, &grads);
      if (!std::isfinite(batch_loss))
        throw TrainingDivergedError(epoch, "train: non-finite loss at epoch " +
                                               std::to_string(epoch));
      epoch_loss += batch_loss * static_cast<double>(batch.size());

      for (std::size_t l = 0; l < net.weights.size(); ++l) {
        auto update = [&](std::vector<double>& param, std::vector<double>& g,
                          std::vector<double>& v) {
          if (config.optimizer == OptimizerKind::kRmsProp) {
            for (std::size_t t = 0; t < param.size(); ++t) {
              v[t] = kDecay * v[t] + (1.0 - kDecay) * g[t] * g[t];
              param[t] -= config.learning_rate * g[t] / (std::sqrt(v[t]) + kEps);
            }
          } else {
            for (std::size_t t = 0; t < param.size(); ++t)
              param[t] -= config.learning_rate * g[t];
          }
        };
        update(net.weights[l], grads.weights[l], sq_avg.weights[l]);
        update(net.biases[l], grads.biases[l], sq_avg.biases[l]);
      }
    }
    history.train_lde.push_back(epoch_loss / static_cast<double>(train_pairs.size()));
    history.val_lde.push_back(evaluate_lde(net, stack, val_pairs, kind, threads));
  }
  return history;
}

/// One distance record per pair, symmetric by construction.
inline DistanceGraph estimate_graph(const DistanceEstimator& estimator,
                                    const ProjectionStack& stack, const PairSet& pairs,
                                    int threads = 1) {
  DistanceGraph g;
  g.node_count = stack.count;
  g.records.resize(pairs.size());
  for (const auto& p : pairs)
    if (p.i < 0 || p.j >= stack.count || p.i >= p.j)
      throw std::invalid_argument("estimate_graph: bad pair indices");

  if (!estimator.is_siamese()) {
    parallel_for(static_cast<int>(pairs.size()), resolve_threads(threads), [&](int k, int) {
      const auto& p = pairs[static_cast<std::size_t>(k)];
      auto a = stack.image_view(p.i);
      auto b = stack.image_view(p.j);
      double s = 0;
      for (std::size_t t = 0; t < a.size(); ++t) s += (a[t] - b[t]) * (a[t] - b[t]);
      g.records[static_cast<std::size_t>(k)] = {p.i, p.j, std::sqrt(s), 1.0};
    });
    return g;
  }

  std::unordered_map<int, int> slot_of;
  std::vector<int> slot_index;
  for (const auto& p : pairs) {
    for (int idx : {p.i, p.j})
      if (slot_of.emplace(idx, static_cast<int>(slot_index.size())).second)
        slot_index.push_back(idx);
  }
  std::vector<std::vector<double>> features(slot_index.size());
  parallel_for(static_cast<int>(slot_index.size()), resolve_threads(threads), [&](int s, int) {
    features[static_cast<std::size_t>(s)] =
        embed(estimator.net(), stack.image(slot_index[static_cast<std::size_t>(s)]));
  });
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    const double d = feature_distance(features[static_cast<std::size_t>(slot_of[p.i])],
                                      features[static_cast<std::size_t>(slot_of[p.j])],
                                      estimator.feature_kind());
    g.records[k] = {p.i, p.j, d, 1.0};
  }
  return g;
}

// ---------------------------------------------------------------------------
// Loss history file: CSV `epoch,train_lde,val_lde`.

inline void save_history_csv(const std::string& path, const TrainHistory& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_history_csv: cannot open " + path);
  out << "epoch,train_lde,val_lde\n";
  char buf[160];
  for (std::size_t e = 0; e < history.train_lde.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", e, history.train_lde[e],
                  history.val_lde[e]);
    out << buf;
  }
  if (!out) throw std::runtime_error("save_history_csv: write failed for " + path);
}

inline TrainHistory load_history_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_history_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line).size() != 3)
    throw std::runtime_error("load_history_csv: missing/invalid header in " + path);
  TrainHistory h;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) throw std::runtime_error("load_history_csv: expected 3 fields in " + path);
    h.train_lde.push_back(detail::parse_double(f[1], path));
    h.val_lde.push_back(detail::parse_double(f[2], path));
  }
  return h;
}

}  // namespace orient
