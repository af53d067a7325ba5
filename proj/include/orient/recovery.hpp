#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "orient/geometry.hpp"
#include "orient/graph.hpp"
#include "orient/random.hpp"

namespace orient {

namespace detail {

inline double clamped_target(double d) { return std::clamp(d, 0.0, kPi); }

/// d_q on raw 4-vectors (assumed unit) with the inner product clamped.
inline double raw_quat_distance(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double s =
      std::clamp(a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3], -1.0, 1.0);
  return 2.0 * std::acos(std::abs(s));
}

}  // namespace detail

/// Mean squared residual between graph distances (clamped to [0, pi]) and the
/// distances induced by the orientations, over the given records.
inline double loss_or(std::span<const std::array<double, 4>> orientations,
                      std::span<const DistanceRecord> records) {
  if (records.empty()) return 0.0;
  double s = 0, wsum = 0;
  for (const auto& rec : records) {
    const double r = detail::clamped_target(rec.d) -
                     detail::raw_quat_distance(orientations[static_cast<std::size_t>(rec.i)],
                                               orientations[static_cast<std::size_t>(rec.j)]);
    s += rec.weight * r * r;
    wsum += rec.weight;
  }
  return wsum > 0 ? s / wsum : 0.0;
}

inline std::vector<std::array<double, 4>> to_raw(std::span<const UnitQuaternion> qs) {
  std::vector<std::array<double, 4>> out(qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) out[i] = qs[i].components();
  return out;
}

/// Weighted-mean squared residual over the records plus its gradient with
/// respect to the ambient quaternion coordinates. This is the differentiable
/// path recover() steps on: the d_q inner product is inset-clamped so the
/// acos gradient stays bounded as pairs approach coincidence.
inline double loss_or_gradient(std::span<const std::array<double, 4>> orientations,
                               std::span<const DistanceRecord> records,
                               std::span<std::array<double, 4>> grad) {
  constexpr double kGradClamp = 1.0 - 1e-7;
  for (auto& g : grad) g = {0, 0, 0, 0};
  if (records.empty()) return 0.0;
  double loss = 0;
  const double inv_count = 1.0 / static_cast<double>(records.size());
  for (const auto& rec : records) {
    const auto& qi = orientations[static_cast<std::size_t>(rec.i)];
    const auto& qj = orientations[static_cast<std::size_t>(rec.j)];
    const double s = qi[0] * qj[0] + qi[1] * qj[1] + qi[2] * qj[2] + qi[3] * qj[3];
    const double sc = std::clamp(s, -kGradClamp, kGradClamp);
    const double d = 2.0 * std::acos(std::abs(sc));
    const double r = detail::clamped_target(rec.d) - d;
    loss += rec.weight * r * r * inv_count;
    // dL/dqi = 4 w r sign(s) / sqrt(1 - s^2) * qj (and symmetrically)
    const double sign = sc >= 0 ? 1.0 : -1.0;
    const double coeff = rec.weight * inv_count * 4.0 * r * sign / std::sqrt(1.0 - sc * sc);
    auto& gi = grad[static_cast<std::size_t>(rec.i)];
    auto& gj = grad[static_cast<std::size_t>(rec.j)];
    for (int c = 0; c < 4; ++c) {
      gi[c] += coeff * qj[c];
      gj[c] += coeff * qi[c];
    }
  }
  return loss;
}

inline double loss_or(std::span<const UnitQuaternion> orientations, const DistanceGraph& graph) {
  const auto raw = to_raw(orientations);
  return loss_or(raw, graph.records);
}

inline double loss_or(std::span<const UnitQuaternion> orientations,
                      std::span<const DistanceRecord> records) {
  const auto raw = to_raw(orientations);
  return loss_or(raw, records);
}

/// Adds Gaussian error of the given variance to every distance, then clamps
/// back into [0, pi].
inline DistanceGraph perturb_graph(const DistanceGraph& graph, double variance,
                                   std::uint64_t seed) {
  if (!(variance >= 0.0)) throw std::invalid_argument("perturb_graph: variance must be >= 0");
  DistanceGraph out = graph;
  if (variance == 0.0) return out;
  std::mt19937_64 rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, std::sqrt(variance));
  for (auto& rec : out.records) rec.d = std::clamp(rec.d + noise(rng), 0.0, kPi);
  return out;
}

enum class RecoveryInit { kRandomUniform, kProvided };

struct RecoveryConfig {
  int batch_size = 256;
  double learning_rate = 0.1;
  int max_steps = 40000;
  int checkpoint_interval = 100;
  int convergence_window = 20;
  double convergence_tolerance = 1e-5;
  /// Plateaus trigger a restore of the best configuration and a halving of
  /// the learning rate; after this many halvings the next plateau stops the
  /// run. Noisy graphs need the annealing to settle instead of diffusing.
  int max_annealings = 8;
  std::uint64_t seed = 0;
  RecoveryInit init = RecoveryInit::kRandomUniform;
  std::vector<UnitQuaternion> initial;

  void validate() const {
    if (batch_size < 1 || max_steps < 1 || checkpoint_interval < 1 || convergence_window < 1)
      throw std::invalid_argument("RecoveryConfig: counts must be positive");
    if (!(learning_rate > 0) || !(convergence_tolerance > 0))
      throw std::invalid_argument("RecoveryConfig: rates/tolerances must be positive");
    if (max_annealings < 0)
      throw std::invalid_argument("RecoveryConfig: max_annealings must be >= 0");
  }
};

struct RecoveryResult {
  std::vector<UnitQuaternion> orientations;
  std::vector<double> sampled_loss;     // batch L_OR per step
  std::vector<double> checkpoint_loss;  // full-graph L_OR at checkpoints
  bool converged = false;
  bool graph_connected = true;
  int steps = 0;

  double min_checkpoint_loss() const {
    double m = std::numeric_limits<double>::infinity();
    for (double v : checkpoint_loss) m = std::min(m, v);
    return m;
  }
};

class RecoveryDivergedError : public std::runtime_error {
 public:
  RecoveryDivergedError(int step_index, const std::string& what_arg)
      : std::runtime_error(what_arg), step(step_index) {}
  int step;
};

/// Embeds the graph on the unit-quaternion sphere by mini-batch descent on
/// L_OR: an Adam step in the ambient coordinates followed by renormalization
/// to S^3. When the best full-graph loss stops improving by
/// convergence_tolerance over convergence_window consecutive checkpoints, the
/// best configuration is restored and the learning rate halved; after
/// max_annealings halvings the next plateau ends the run. The returned
/// orientations are the best-checkpoint configuration.
inline RecoveryResult recover(const DistanceGraph& graph, const RecoveryConfig& config) {
  config.validate();
  graph.validate();
  if (graph.node_count < 2) throw std::invalid_argument("recover: need at least 2 nodes");
  if (graph.records.empty()) throw std::invalid_argument("recover: graph has no records");

  const std::size_t n = static_cast<std::size_t>(graph.node_count);
  std::vector<std::array<double, 4>> q(n);
  if (config.init == RecoveryInit::kProvided) {
    if (config.initial.size() != n)
      throw std::invalid_argument("recover: provided initialization has wrong size");
    q = to_raw(config.initial);
  } else {
    auto start = sample_orientations(SamplingScheme::uniform_so3(), graph.node_count,
                                     mix_seed(config.seed, 0x5eed));
    q = to_raw(start);
  }

  RecoveryResult result;
  result.graph_connected = graph.connected();

  // Adam state over the ambient coordinates
  std::vector<std::array<double, 4>> m(n, {0, 0, 0, 0}), v(n, {0, 0, 0, 0});
  std::vector<std::array<double, 4>> grad(n);
  std::vector<DistanceRecord> batch;
  batch.reserve(static_cast<std::size_t>(config.batch_size));
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  std::vector<std::uint32_t> order(graph.records.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<std::uint32_t>(k);
  std::mt19937_64 shuffle_rng = make_rng(config.seed, 0xba7c4);

  double best = std::numeric_limits<double>::infinity();
  std::vector<std::array<double, 4>> best_q = q;
  int checkpoints_since_improvement = 0;
  int annealings = 0;
  double learning_rate = config.learning_rate;
  std::size_t cursor = order.size();  // forces an initial shuffle
  int step = 0;
  double beta1_pow = 1.0, beta2_pow = 1.0;

  while (step < config.max_steps) {
    ++step;
    if (cursor >= order.size()) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      cursor = 0;
    }
    const std::size_t batch_end =
        std::min(order.size(), cursor + static_cast<std::size_t>(config.batch_size));

    batch.clear();
    for (std::size_t t = cursor; t < batch_end; ++t) batch.push_back(graph.records[order[t]]);
    cursor = batch_end;
    const double batch_loss = loss_or_gradient(q, batch, grad);
    if (!std::isfinite(batch_loss))
      throw RecoveryDivergedError(step, "recover: non-finite batch loss at step " +
                                            std::to_string(step));
    result.sampled_loss.push_back(batch_loss);

    beta1_pow *= kBeta1;
    beta2_pow *= kBeta2;
    const double m_corr = 1.0 / (1.0 - beta1_pow);
    const double v_corr = 1.0 / (1.0 - beta2_pow);
    for (std::size_t i = 0; i < n; ++i) {
      auto& qi = q[i];
      double norm_sq = 0;
      for (int c = 0; c < 4; ++c) {
        m[i][c] = kBeta1 * m[i][c] + (1 - kBeta1) * grad[i][c];
        v[i][c] = kBeta2 * v[i][c] + (1 - kBeta2) * grad[i][c] * grad[i][c];
        qi[c] -= learning_rate * (m[i][c] * m_corr) / (std::sqrt(v[i][c] * v_corr) + kEps);
        norm_sq += qi[c] * qi[c];
      }
      const double inv_norm = 1.0 / std::sqrt(norm_sq);
      for (int c = 0; c < 4; ++c) qi[c] *= inv_norm;
    }

    if (step % config.checkpoint_interval == 0) {
      const double full = loss_or(q, graph.records);
      if (!std::isfinite(full))
        throw RecoveryDivergedError(step, "recover: non-finite checkpoint loss at step " +
                                              std::to_string(step));
      result.checkpoint_loss.push_back(full);
      if (full < best - config.convergence_tolerance) {
        if (full < best) {
          best = full;
          best_q = q;
        }
        checkpoints_since_improvement = 0;
      } else {
        if (full < best) {
          best = full;
          best_q = q;
        }
        if (++checkpoints_since_improvement >= config.convergence_window) {
          if (annealings >= config.max_annealings) {
            result.converged = true;
            break;
          }
          // plateau: restore the best configuration, halve the step, reset
          // the moment estimates
          ++annealings;
          learning_rate *= 0.5;
          q = best_q;
          for (auto& mi : m) mi = {0, 0, 0, 0};
          for (auto& vi : v) vi = {0, 0, 0, 0};
          beta1_pow = beta2_pow = 1.0;
          checkpoints_since_improvement = 0;
        }
      }
    }
  }

  result.steps = step;
  result.orientations.reserve(n);
  for (const auto& qi : best_q)
    result.orientations.emplace_back(qi[0], qi[1], qi[2], qi[3]);
  return result;
}

/// Trace JSON: {steps, sampled_loss[], checkpoint_loss[], converged}.
inline nlohmann::json recovery_trace_json(const RecoveryResult& r) {
  return {{"steps", r.steps},
          {"sampled_loss", r.sampled_loss},
          {"checkpoint_loss", r.checkpoint_loss},
          {"converged", r.converged},
          {"graph_connected", r.graph_connected}};
}

}  // namespace orient
