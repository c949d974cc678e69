#pragma once

#include "ncedf/cedf.hpp"
#include "ncedf/geometry.hpp"
#include "ncedf/kinematics.hpp"
#include "ncedf/parallel.hpp"
#include "ncedf/rng.hpp"
#include "ncedf/shapes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ncedf {

struct MppiConfig {
  std::size_t n_rollouts = 800;
  std::size_t horizon = 20;
  double sigma = 0.22360679774997896;  // sqrt(0.05)
  double lambda = 0.02;
  double alpha_u = 0.9;
  double w_goal = 12.0;
  double w_coll = 1.1;
  double w_state = 50.0;
  double safety_margin = 0.05;
  double epsilon = 1e-3;
  double tau = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_rollouts < 1) throw std::invalid_argument("mppi: n_rollouts must be >= 1");
    if (horizon < 1) throw std::invalid_argument("mppi: horizon must be >= 1");
    if (!(sigma >= 0.0)) throw std::invalid_argument("mppi: sigma must be non-negative");
    if (!(lambda > 0.0)) throw std::invalid_argument("mppi: lambda must be positive");
    if (!(epsilon > 0.0)) throw std::invalid_argument("mppi: epsilon must be positive");
    if (!(alpha_u > 0.0 && alpha_u < 1.0)) throw std::invalid_argument("mppi: alpha_u must be in (0, 1)");
    if (!(tau > 0.0)) throw std::invalid_argument("mppi: tau must be positive");
    if (!(w_goal >= 0.0 && w_coll >= 0.0 && w_state >= 0.0))
      throw std::invalid_argument("mppi: cost weights must be non-negative");
    if (!(safety_margin >= 0.0)) throw std::invalid_argument("mppi: safety margin must be non-negative");
  }
};

/// H control vectors of dimension 3M, stored step-major.
struct ControlSequence {
  std::size_t dim = 0;
  std::vector<double> values;

  static ControlSequence zeros(std::size_t horizon, std::size_t dim) { return {dim, std::vector<double>(horizon * dim, 0.0)}; }

  std::size_t horizon() const { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const double> step(std::size_t t) const { return {values.data() + t * dim, dim}; }
  std::span<double> step(std::size_t t) { return {values.data() + t * dim, dim}; }

  bool is_projected(double tol = kProjectionTolerance) const {
    for (std::size_t i = 0; i < values.size(); i += 3)
      if (std::abs(values[i] + values[i + 1] + values[i + 2]) / 3.0 > tol) return false;
    return true;
  }

  friend bool operator==(const ControlSequence&, const ControlSequence&) = default;
};

/// Minimum distance between the robot at configuration q and the current
/// obstacle observation. `fk` holds the link base frames for q.
class CollisionBackend {
 public:
  virtual ~CollisionBackend() = default;
  virtual double min_distance(const RobotConfig& q, std::span<const Pose> fk) const = 0;
};

class NcedfBackend final : public CollisionBackend {
 public:
  NcedfBackend(const RobotCedf& cedf, const PreparedCloud& cloud) : cedf_(&cedf), cloud_(&cloud) {
    if (cloud.size() == 0) throw std::invalid_argument("collision query needs a non-empty cloud");
  }
  double min_distance(const RobotConfig& q, std::span<const Pose> fk) const override {
    return cloud_min_distance(ConfiguredRobot(*cedf_, q, fk), *cloud_).distance;
  }

 private:
  const RobotCedf* cedf_;
  const PreparedCloud* cloud_;
};

class SpheresBackend final : public CollisionBackend {
 public:
  SpheresBackend(std::vector<LinkGeometry> geoms, std::size_t k_per_link, const PreparedCloud& cloud)
      : geoms_(std::move(geoms)), k_(k_per_link), cloud_(&cloud) {
    if (cloud.size() == 0) throw std::invalid_argument("collision query needs a non-empty cloud");
  }
  double min_distance(const RobotConfig& q, std::span<const Pose> fk) const override {
    return spheres_cloud_distance(robot_shape_spheres(q, geoms_, k_, fk), *cloud_);
  }

 private:
  std::vector<LinkGeometry> geoms_;
  std::size_t k_;
  const PreparedCloud* cloud_;
};

class PointCloudBackend final : public CollisionBackend {
 public:
  PointCloudBackend(std::vector<LinkGeometry> geoms, std::size_t points, const PreparedCloud& cloud)
      : geoms_(std::move(geoms)), points_(points), cloud_(&cloud) {
    if (cloud.size() == 0) throw std::invalid_argument("collision query needs a non-empty cloud");
    if (points_ < geoms_.size()) throw std::invalid_argument("pcloud needs at least one point per link");
  }
  double min_distance(const RobotConfig& q, std::span<const Pose> fk) const override {
    return pointcloud_pair_distance(robot_surface_cloud(q, geoms_, points_, fk), *cloud_);
  }

 private:
  std::vector<LinkGeometry> geoms_;
  std::size_t points_;
  const PreparedCloud* cloud_;
};

struct CostTerms {
  double goal = 0.0;
  double coll = 0.0;
  double state = 0.0;

  double total() const { return goal + coll + state; }
  CostTerms& operator+=(const CostTerms& o) {
    goal += o.goal;
    coll += o.coll;
    state += o.state;
    return *this;
  }
};

struct RolloutResult {
  std::vector<RobotConfig> configs;  // H+1, configs[0] is the query state
  std::vector<ArcLengths> arcs;      // H+1
  CostTerms cost;
  double total = 0.0;
};

/// u^{j,t} = project(ref^t + σ ξ), ξ from the Philox stream (seed; iteration, j, t).
inline ControlSequence sample_rollout(const ControlSequence& ref, const MppiConfig& cfg, std::uint32_t iteration,
                                      std::uint32_t j) {
  ControlSequence u = ref;
  thread_local std::vector<double> noise;
  noise.resize(ref.dim);
  for (std::size_t t = 0; t < ref.horizon(); ++t) {
    auto step = u.step(t);
    if (cfg.sigma > 0.0) {
      philox_normals(cfg.seed, iteration, j, static_cast<std::uint32_t>(t), std::span<double>(noise));
      for (std::size_t c = 0; c < ref.dim; ++c) step[c] += cfg.sigma * noise[c];
    }
    project_control_inplace(step);
  }
  return u;
}

inline std::vector<ControlSequence> sample_rollouts(const ControlSequence& ref, const MppiConfig& cfg,
                                                    std::uint32_t iteration) {
  std::vector<ControlSequence> out;
  out.reserve(cfg.n_rollouts);
  for (std::size_t j = 0; j < cfg.n_rollouts; ++j)
    out.push_back(sample_rollout(ref, cfg, iteration, static_cast<std::uint32_t>(j)));
  return out;
}

inline RolloutResult rollout_states(const ArcLengths& x0, const ControlSequence& U, std::span<const LinkGeometry> geoms,
                                    double tau) {
  if (U.dim != x0.values.size()) throw std::invalid_argument("rollout_states: control dimension mismatch");
  RolloutResult r;
  r.arcs.reserve(U.horizon() + 1);
  r.configs.reserve(U.horizon() + 1);
  r.arcs.push_back(x0);
  r.configs.push_back(arc_lengths_to_robot_config(x0, geoms));
  for (std::size_t t = 0; t < U.horizon(); ++t) {
    r.arcs.push_back(step_dynamics(r.arcs.back(), U.step(t), tau));
    r.configs.push_back(arc_lengths_to_robot_config(r.arcs.back(), geoms));
  }
  return r;
}

// Per-step cost terms.
inline double goal_term(const Pose& ee, const Pose& goal, double w_goal) { return w_goal * frobenius_distance(ee, goal); }

inline double collision_term(double min_distance, const MppiConfig& cfg) {
  return cfg.w_coll / std::max(min_distance - cfg.safety_margin, cfg.epsilon);
}

inline double state_term(const ArcLengths& x, std::span<const LinkGeometry> geoms, double w_state) {
  double sum = 0.0;
  for (std::size_t i = 0; i < geoms.size(); ++i)
    for (double l : x.link(i)) sum += std::max(geoms[i].l_min - l, 0.0) + std::max(l - geoms[i].l_max, 0.0);
  return w_state * sum;
}

/// Sums over k = 0..H-1 of the configs (configs[H] is not costed).
inline double cost_goal(std::span<const RobotConfig> Q, std::span<const LinkGeometry> geoms, const Pose& goal,
                        double w_goal) {
  double sum = 0.0;
  std::vector<Pose> fk;
  for (std::size_t k = 0; k + 1 < Q.size(); ++k) {
    forward_kinematics(Q[k], geoms, fk);
    sum += goal_term(fk.back(), goal, w_goal);
  }
  return sum;
}

inline double cost_collision(std::span<const RobotConfig> Q, std::span<const LinkGeometry> geoms,
                             const CollisionBackend& backend, const MppiConfig& cfg) {
  double sum = 0.0;
  std::vector<Pose> fk;
  for (std::size_t k = 0; k + 1 < Q.size(); ++k) {
    forward_kinematics(Q[k], geoms, fk);
    sum += collision_term(backend.min_distance(Q[k], fk), cfg);
  }
  return sum;
}

inline double cost_state(std::span<const ArcLengths> X, std::span<const LinkGeometry> geoms, double w_state) {
  double sum = 0.0;
  for (std::size_t k = 0; k + 1 < X.size(); ++k) sum += state_term(X[k], geoms, w_state);
  return sum;
}

/// Exponentially weighted average of the rollouts, blended with the reference.
inline ControlSequence mppi_update(std::span<const double> costs, std::span<const ControlSequence> rollouts,
                                   const ControlSequence& ref, double lambda, double alpha_u) {
  if (costs.empty() || costs.size() != rollouts.size())
    throw std::invalid_argument("mppi_update: need one cost per rollout");
  const auto [lo, hi] = std::minmax_element(costs.begin(), costs.end());
  const double c_min = *lo, range = *hi - *lo;

  std::vector<double> weights(costs.size());
  double w_sum = 0.0;
  for (std::size_t j = 0; j < costs.size(); ++j) {
    const double normalized = range > 0.0 ? (costs[j] - c_min) / range : 0.0;
    weights[j] = std::exp(-normalized / lambda);
    w_sum += weights[j];
  }

  ControlSequence avg = ControlSequence::zeros(ref.horizon(), ref.dim);
  for (std::size_t j = 0; j < rollouts.size(); ++j) {
    const double w = weights[j] / w_sum;
    for (std::size_t i = 0; i < avg.values.size(); ++i) avg.values[i] += w * rollouts[j].values[i];
  }
  for (std::size_t i = 0; i < avg.values.size(); ++i)
    avg.values[i] = (1.0 - alpha_u) * ref.values[i] + alpha_u * avg.values[i];
  for (std::size_t t = 0; t < avg.horizon(); ++t) project_control_inplace(avg.step(t));
  return avg;
}

namespace detail {

/// Cost of one rollout. When `first` is given it is used for k = 0 instead of
/// being recomputed (every rollout starts from the same state).
inline CostTerms rollout_cost(const ArcLengths& x0, const ControlSequence& U, std::span<const LinkGeometry> geoms,
                              const Pose& goal, const CollisionBackend& backend, const MppiConfig& cfg,
                              const CostTerms* first, double* first_distance = nullptr) {
  ArcLengths x = x0;
  std::vector<Pose> fk;
  CostTerms sum;
  for (std::size_t k = 0; k < U.horizon(); ++k) {
    if (k > 0) step_dynamics_inplace(x, U.step(k - 1), cfg.tau);
    if (k == 0 && first) {
      sum += *first;
      continue;
    }
    const RobotConfig q = arc_lengths_to_robot_config(x, geoms);
    forward_kinematics(q, geoms, fk);
    const double d = backend.min_distance(q, fk);
    if (k == 0 && first_distance) *first_distance = d;
    sum += CostTerms{goal_term(fk.back(), goal, cfg.w_goal), collision_term(d, cfg), state_term(x, geoms, cfg.w_state)};
  }
  return sum;
}

}  // namespace detail

/// Full cost breakdown of one control sequence from x0.
inline RolloutResult evaluate_rollout(const ArcLengths& x0, const ControlSequence& U, std::span<const LinkGeometry> geoms,
                                      const Pose& goal, const CollisionBackend& backend, const MppiConfig& cfg) {
  RolloutResult r = rollout_states(x0, U, geoms, cfg.tau);
  r.cost = detail::rollout_cost(x0, U, geoms, goal, backend, cfg, nullptr);
  r.total = r.cost.total();
  return r;
}

struct MppiDiagnostics {
  double min_distance = 0.0;  // backend distance at the current state
  double best_cost = 0.0;
  double mean_cost = 0.0;
  CostTerms best_terms;  // breakdown of the lowest-cost rollout
  std::size_t best_index = 0;
  double solve_ms = 0.0;
};

struct MppiStepResult {
  std::vector<double> control;  // ũ^0, executed
  ControlSequence updated;      // ũ
  ControlSequence next_warm;    // (ũ^1, ..., ũ^{H-1}, 0)
  MppiDiagnostics diag;
};

inline MppiStepResult mppi_step(const ArcLengths& state, std::span<const LinkGeometry> geoms, const Pose& goal,
                                const CollisionBackend& backend, const MppiConfig& cfg, const ControlSequence& warm,
                                std::uint32_t iteration, std::size_t threads = 1) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  if (warm.dim != state.values.size() || warm.horizon() != cfg.horizon)
    throw std::invalid_argument("mppi_step: warm start has the wrong shape");
  if (state.link_count() != geoms.size()) throw std::invalid_argument("mppi_step: state/geometry link count mismatch");

  MppiStepResult out;
  const RobotConfig q0 = arc_lengths_to_robot_config(state, geoms);
  const auto fk0 = forward_kinematics(q0, geoms);
  out.diag.min_distance = backend.min_distance(q0, fk0);
  const CostTerms first{goal_term(fk0.back(), goal, cfg.w_goal), collision_term(out.diag.min_distance, cfg),
                        state_term(state, geoms, cfg.w_state)};

  std::vector<ControlSequence> rollouts(cfg.n_rollouts);
  std::vector<CostTerms> terms(cfg.n_rollouts);
  parallel_for(cfg.n_rollouts, threads, [&](std::size_t j) {
    rollouts[j] = sample_rollout(warm, cfg, iteration, static_cast<std::uint32_t>(j));
    terms[j] = detail::rollout_cost(state, rollouts[j], geoms, goal, backend, cfg, &first);
  });

  std::vector<double> costs(cfg.n_rollouts);
  double sum = 0.0;
  for (std::size_t j = 0; j < cfg.n_rollouts; ++j) {
    costs[j] = terms[j].total();
    sum += costs[j];
    if (costs[j] < costs[out.diag.best_index]) out.diag.best_index = j;
  }
  out.diag.best_cost = costs[out.diag.best_index];
  out.diag.best_terms = terms[out.diag.best_index];
  out.diag.mean_cost = sum / static_cast<double>(cfg.n_rollouts);

  out.updated = mppi_update(costs, rollouts, warm, cfg.lambda, cfg.alpha_u);
  const auto first_step = out.updated.step(0);
  out.control.assign(first_step.begin(), first_step.end());
  out.next_warm = ControlSequence::zeros(cfg.horizon, warm.dim);
  std::copy(out.updated.values.begin() + static_cast<std::ptrdiff_t>(warm.dim), out.updated.values.end(),
            out.next_warm.values.begin());

  out.diag.solve_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/// Receding-horizon wrapper: keeps the warm start and the iteration counter.
class MppiController {
 public:
  MppiController(MppiConfig cfg, std::vector<LinkGeometry> geoms)
      : cfg_(cfg), geoms_(std::move(geoms)), warm_(ControlSequence::zeros(cfg.horizon, 3 * geoms_.size())) {
    cfg_.validate();
  }

  MppiStepResult step(const ArcLengths& state, const Pose& goal, const CollisionBackend& backend,
                      std::size_t threads = 1) {
    auto r = mppi_step(state, geoms_, goal, backend, cfg_, warm_, iteration_, threads);
    warm_ = r.next_warm;
    ++iteration_;
    return r;
  }

  void reset() {
    warm_ = ControlSequence::zeros(cfg_.horizon, 3 * geoms_.size());
    iteration_ = 0;
  }

  const MppiConfig& config() const { return cfg_; }
  const ControlSequence& warm_start() const { return warm_; }
  std::uint32_t iteration() const { return iteration_; }

 private:
  MppiConfig cfg_;
  std::vector<LinkGeometry> geoms_;
  ControlSequence warm_;
  std::uint32_t iteration_ = 0;
};

}  // namespace ncedf
