#pragma once

#include "ncedf/cedf.hpp"
#include "ncedf/datagen.hpp"
#include "ncedf/geometry.hpp"
#include "ncedf/kinematics.hpp"
#include "ncedf/mppi.hpp"
#include "ncedf/parallel.hpp"
#include "ncedf/rng.hpp"
#include "ncedf/shapes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ncedf {

struct SphereObstacle {
  Vec3 center = Vec3::Zero();
  double radius = 0.5;
  Vec3 velocity = Vec3::Zero();
};

struct Environment {
  std::vector<SphereObstacle> obstacles;
  Aabb bounds{Vec3(-5.0, -5.0, 2.0), Vec3(5.0, 5.0, 8.0)};
  double time = 0.0;
};

/// Moves every obstacle by velocity·dt; a centre leaving the bounds is
/// mirrored back and that velocity component flips.
inline void advance_obstacles(Environment& env, double dt) {
  for (auto& o : env.obstacles) {
    o.center += o.velocity * dt;
    for (int a = 0; a < 3; ++a) {
      const double lo = env.bounds.min[a], hi = env.bounds.max[a];
      if (o.center[a] > hi) {
        o.center[a] = std::max(lo, 2.0 * hi - o.center[a]);
        o.velocity[a] = -o.velocity[a];
      } else if (o.center[a] < lo) {
        o.center[a] = std::min(hi, 2.0 * lo - o.center[a]);
        o.velocity[a] = -o.velocity[a];
      }
    }
  }
  env.time += dt;
}

inline Environment advanced(Environment env, double dt) {
  advance_obstacles(env, dt);
  return env;
}

/// Uniform samples on the obstacle surfaces, split in proportion to surface
/// area; leftover points go round-robin from the first obstacle.
inline std::vector<Vec3> sample_point_cloud(const Environment& env, std::size_t n_points, Rng& rng) {
  if (env.obstacles.empty()) throw std::invalid_argument("sample_point_cloud: environment has no obstacles");
  double area = 0.0;
  for (const auto& o : env.obstacles) area += o.radius * o.radius;
  std::vector<std::size_t> counts(env.obstacles.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double r = env.obstacles[i].radius;
    counts[i] = static_cast<std::size_t>(std::floor(static_cast<double>(n_points) * r * r / area));
    assigned += counts[i];
  }
  for (std::size_t i = 0; assigned < n_points; i = (i + 1) % counts.size(), ++assigned) ++counts[i];

  std::vector<Vec3> out;
  out.reserve(n_points);
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const auto& o = env.obstacles[i];
    for (std::size_t k = 0; k < counts[i]; ++k) {
      Vec3 dir;
      do {
        dir = Vec3(rng.normal(), rng.normal(), rng.normal());
      } while (dir.squaredNorm() < 1e-24);
      out.push_back(o.center + o.radius * dir.normalized());
    }
  }
  return out;
}

inline constexpr std::size_t kGroundTruthBackbonePoints = 200;

/// World-frame backbone samples for every link, with the link index per point.
struct BackboneSamples {
  std::vector<Vec3> points;
  std::vector<double> radius;  // radius of the owning link
};

inline BackboneSamples world_backbones(const RobotConfig& q, std::span<const LinkGeometry> geoms,
                                       std::span<const Pose> fk, std::size_t per_link = kGroundTruthBackbonePoints) {
  BackboneSamples out;
  for (std::size_t i = 0; i < geoms.size(); ++i)
    for (const auto& p : backbone_points(q[i], geoms[i].length, per_link)) {
      out.points.push_back(fk[i] * p);
      out.radius.push_back(geoms[i].radius);
    }
  return out;
}

/// Signed clearance: min over obstacles and backbone samples of
/// ‖c − b‖ − r_link − R. Negative means the bodies overlap.
inline double ground_truth_robot_distance(const RobotConfig& q, std::span<const LinkGeometry> geoms,
                                          const Environment& env) {
  const auto fk = forward_kinematics(q, geoms);
  const auto bb = world_backbones(q, geoms, fk);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& o : env.obstacles)
    for (std::size_t k = 0; k < bb.points.size(); ++k)
      best = std::min(best, (o.center - bb.points[k]).norm() - bb.radius[k] - o.radius);
  return best;
}

/// Exact minimum distance from a point set to the robot surface (evaluation
/// only). Capsule distances (backbone − r) lower-bound the exact distance and
/// order the candidates, so only a few exact evaluations are needed.
inline double exact_cloud_distance(const RobotConfig& q, std::span<const LinkGeometry> geoms,
                                   std::span<const Vec3> cloud) {
  const auto fk = forward_kinematics(q, geoms);
  struct Candidate {
    double bound;
    std::size_t point, link;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < geoms.size(); ++i) {
    const auto bb = backbone_points(q[i], geoms[i].length, kGroundTruthBackbonePoints);
    const double spacing = geoms[i].length / static_cast<double>(kGroundTruthBackbonePoints - 1);
    for (std::size_t p = 0; p < cloud.size(); ++p) {
      const Vec3 local = fk[i].inverse() * cloud[p];
      double d = std::numeric_limits<double>::infinity();
      for (const auto& b : bb) d = std::min(d, (local - b).norm());
      // Backbone sampling error is at most half a spacing.
      cands.push_back({std::max(0.0, d - 0.5 * spacing - geoms[i].radius), p, i});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.bound < b.bound; });
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : cands) {
    if (c.bound >= best) break;
    best = std::min(best, analytic_link_distance(fk[c.link].inverse() * cloud[c.point], q[c.link], geoms[c.link]));
  }
  return best;
}

struct EnvironmentSpec {
  std::size_t n_obstacles = 8;
  double radius_min = 0.3;
  double radius_max = 0.6;
  double velocity_max = 1.0;  // per component, so every speed is at most √3
  Aabb bounds{Vec3(-5.0, -5.0, 2.0), Vec3(5.0, 5.0, 8.0)};
  double min_start_clearance = 1.0;
  std::vector<SphereObstacle> obstacles;  // used as given when non-empty

  void validate() const {
    if (!(radius_min > 0.0 && radius_min <= radius_max)) throw std::invalid_argument("obstacle radius range invalid");
    if (!(velocity_max >= 0.0)) throw std::invalid_argument("velocity_max must be non-negative");
    for (int a = 0; a < 3; ++a)
      if (!(bounds.min[a] < bounds.max[a])) throw std::invalid_argument("workspace bounds are empty");
    if (obstacles.empty() && n_obstacles < 1) throw std::invalid_argument("environment needs at least one obstacle");
    for (const auto& o : obstacles) {
      if (!(o.radius > 0.0)) throw std::invalid_argument("obstacle radius must be positive");
      if (!bounds.contains(o.center, 1e-12)) throw std::invalid_argument("obstacle centre outside workspace bounds");
      if (o.velocity.norm() > std::sqrt(3.0) + 1e-12) throw std::invalid_argument("obstacle speed exceeds sqrt(3)");
    }
    if (obstacles.empty() && velocity_max > 1.0) throw std::invalid_argument("velocity_max above 1 breaks the sqrt(3) speed bound");
  }
};

struct Scenario {
  std::vector<LinkGeometry> links = std::vector<LinkGeometry>(4);
  std::optional<ArcLengths> initial;  // straight when absent
  EnvironmentSpec environment;
  std::optional<Pose> goal;  // drawn from the seed when absent
  double goal_spread = 0.25;  // chamber offsets of the random goal configuration
  MppiConfig mppi;
  std::size_t t_max = 300;
  std::size_t cloud_points = 500;
  std::uint64_t seed = 0;
  double success_threshold = 0.3;

  ArcLengths initial_state() const { return initial ? *initial : ArcLengths::straight(links); }

  void validate() const {
    if (links.empty()) throw std::invalid_argument("scenario needs at least one link");
    for (const auto& g : links)
      if (!g.valid()) throw std::invalid_argument("invalid link geometry");
    if (initial) {
      if (initial->values.size() != 3 * links.size())
        throw std::invalid_argument("initial arc lengths must have 3 entries per link");
      for (std::size_t i = 0; i < links.size(); ++i) {
        const auto l = initial->link(i);
        if (std::abs((l[0] + l[1] + l[2]) / 3.0 - links[i].length) > 1e-9)
          throw std::invalid_argument("initial arc lengths must average to the backbone length");
      }
    }
    environment.validate();
    for (const auto& g : links)
      if (!(goal_spread >= 0.0 && goal_spread * 4.0 / 3.0 <= std::min(g.l_max - g.length, g.length - g.l_min)))
        throw std::invalid_argument("goal_spread would leave the arc-length limits");
    mppi.validate();
    if (t_max < 1) throw std::invalid_argument("t_max must be >= 1");
    if (cloud_points < 1) throw std::invalid_argument("cloud_points must be >= 1");
    if (!(success_threshold > 0.0)) throw std::invalid_argument("success threshold must be positive");
  }
};

inline constexpr std::uint64_t kEnvStream = 0x656e76;
inline constexpr std::uint64_t kGoalStream = 0x676f616c;
inline constexpr std::uint64_t kCloudStream = 0x636c6f7564;
inline constexpr std::uint64_t kMppiStream = 0x6d707069;

/// Goal configuration: each chamber offset U[-spread, spread], projected to zero mean per link.
inline ArcLengths random_goal_state(const Scenario& s) {
  Rng rng(mix_seed(s.seed, kGoalStream));
  ArcLengths x = ArcLengths::straight(s.links);
  for (std::size_t i = 0; i < s.links.size(); ++i) {
    std::array<double, 3> d{};
    for (auto& v : d) v = rng.uniform(-s.goal_spread, s.goal_spread);
    project_control_inplace(d);
    for (int c = 0; c < 3; ++c) x.link(i)[c] += d[c];
  }
  return x;
}

inline Pose scenario_goal(const Scenario& s) {
  if (s.goal) return *s.goal;
  return forward_kinematics(arc_lengths_to_robot_config(random_goal_state(s), s.links), s.links).back();
}

/// Initial environment: the given obstacles, or random ones (uniform centre,
/// radius and velocity components) kept at least min_start_clearance from the
/// initial robot.
inline Environment make_environment(const Scenario& s) {
  const auto& spec = s.environment;
  Environment env;
  env.bounds = spec.bounds;
  if (!spec.obstacles.empty()) {
    env.obstacles = spec.obstacles;
    return env;
  }
  Rng rng(mix_seed(s.seed, kEnvStream));
  const RobotConfig q0 = arc_lengths_to_robot_config(s.initial_state(), s.links);
  const auto fk = forward_kinematics(q0, s.links);
  const auto bb = world_backbones(q0, s.links, fk);
  constexpr std::size_t kMaxAttempts = 100000;
  for (std::size_t attempt = 0; env.obstacles.size() < spec.n_obstacles; ++attempt) {
    if (attempt == kMaxAttempts) throw std::runtime_error("could not place obstacles clear of the initial robot");
    SphereObstacle o;
    for (int a = 0; a < 3; ++a) o.center[a] = rng.uniform(spec.bounds.min[a], spec.bounds.max[a]);
    o.radius = rng.uniform(spec.radius_min, spec.radius_max);
    for (int a = 0; a < 3; ++a) o.velocity[a] = rng.uniform(-spec.velocity_max, spec.velocity_max);
    double clearance = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < bb.points.size(); ++k)
      clearance = std::min(clearance, (o.center - bb.points[k]).norm() - bb.radius[k] - o.radius);
    if (clearance >= spec.min_start_clearance) env.obstacles.push_back(o);
  }
  return env;
}

/// FNV-1a over the bit patterns of the initial obstacles and the goal.
inline std::uint64_t environment_hash(const Environment& env, const Pose& goal) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& o : env.obstacles) {
    for (int a = 0; a < 3; ++a) mix(o.center[a]);
    mix(o.radius);
    for (int a = 0; a < 3; ++a) mix(o.velocity[a]);
  }
  for (double v : to_row_major(goal)) mix(v);
  return h;
}

enum class ShapeKind { ncedf, spheres, pcloud };

struct ShapeMode {
  ShapeKind kind = ShapeKind::ncedf;
  std::size_t param = 0;  // spheres per link, or robot cloud size

  static constexpr std::size_t kDefaultSpheres = 5;
  static constexpr std::size_t kDefaultCloud = 1000;

  static ShapeMode parse(const std::string& text) {
    const auto colon = text.find(':');
    const std::string name = text.substr(0, colon);
    std::size_t value = 0;
    if (colon != std::string::npos) {
      const std::string digits = text.substr(colon + 1);
      if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos)
        throw std::invalid_argument("shape mode parameter must be a positive integer: '" + text + "'");
      value = std::stoul(digits);
      if (value == 0) throw std::invalid_argument("shape mode parameter must be positive: '" + text + "'");
    }
    if (name == "ncedf" && colon == std::string::npos) return {ShapeKind::ncedf, 0};
    if (name == "spheres") return {ShapeKind::spheres, colon == std::string::npos ? kDefaultSpheres : value};
    if (name == "pcloud") return {ShapeKind::pcloud, colon == std::string::npos ? kDefaultCloud : value};
    throw std::invalid_argument("unknown shape mode '" + text + "' (expected ncedf, spheres[:K] or pcloud[:P])");
  }

  std::string name() const {
    switch (kind) {
      case ShapeKind::ncedf: return "ncedf";
      case ShapeKind::spheres: return "spheres:" + std::to_string(param);
      case ShapeKind::pcloud: return "pcloud:" + std::to_string(param);
    }
    return "?";
  }
};

inline std::unique_ptr<CollisionBackend> make_backend(const ShapeMode& mode, const RobotCedf* cedf,
                                                      std::span<const LinkGeometry> geoms, const PreparedCloud& cloud) {
  switch (mode.kind) {
    case ShapeKind::ncedf:
      if (!cedf) throw std::invalid_argument("ncedf shape mode needs a trained model");
      return std::make_unique<NcedfBackend>(*cedf, cloud);
    case ShapeKind::spheres:
      return std::make_unique<SpheresBackend>(std::vector<LinkGeometry>(geoms.begin(), geoms.end()), mode.param, cloud);
    case ShapeKind::pcloud:
      return std::make_unique<PointCloudBackend>(std::vector<LinkGeometry>(geoms.begin(), geoms.end()), mode.param,
                                                 cloud);
  }
  throw std::logic_error("unhandled shape mode");
}

enum class Outcome { success, collision, stuck };

inline const char* outcome_name(Outcome o) {
  switch (o) {
    case Outcome::success: return "success";
    case Outcome::collision: return "collision";
    case Outcome::stuck: return "stuck";
  }
  return "?";
}

struct StepRecord {
  std::size_t step = 0;
  ArcLengths x;
  RobotConfig q;
  Pose ee_pose = Pose::Identity();
  double min_cedf = 0.0;  // planner's distance to the observed cloud
  double gt_clearance = 0.0;
  double ee_goal_dist = 0.0;
  CostTerms cost;  // best rollout; zero on the final record
  double solve_ms = 0.0;
};

struct EpisodeResult {
  Outcome outcome = Outcome::stuck;
  std::size_t steps = 0;  // controls executed
  std::vector<StepRecord> records;  // steps + 1 entries
  std::uint64_t env_hash = 0;

  double mean_solve_ms() const {
    if (steps == 0) return 0.0;
    double s = 0.0;
    for (const auto& r : records) s += r.solve_ms;
    return s / static_cast<double>(steps);
  }
};

/// Observe, plan, execute, move obstacles. Each step first checks collision
/// (ground-truth clearance < 0), then success, then the step budget.
inline EpisodeResult run_episode(const Scenario& s, const RobotCedf* cedf, const ShapeMode& mode,
                                 std::size_t threads = 1) {
  s.validate();
  if (cedf && cedf->geometries() != s.links) throw std::invalid_argument("model geometry does not match the scenario robot");
  Environment env = make_environment(s);
  const Pose goal = scenario_goal(s);
  MppiConfig mcfg = s.mppi;
  mcfg.seed = mix_seed(s.seed, kMppiStream ^ s.mppi.seed);
  MppiController controller(mcfg, s.links);
  Rng cloud_rng(mix_seed(s.seed, kCloudStream));

  EpisodeResult out;
  out.env_hash = environment_hash(env, goal);
  ArcLengths x = s.initial_state();
  for (std::size_t step = 0;; ++step) {
    StepRecord rec;
    rec.step = step;
    rec.x = x;
    rec.q = arc_lengths_to_robot_config(x, s.links);
    rec.ee_pose = forward_kinematics(rec.q, s.links).back();
    rec.gt_clearance = ground_truth_robot_distance(rec.q, s.links, env);
    rec.ee_goal_dist = frobenius_distance(rec.ee_pose, goal);

    const auto cloud_points = sample_point_cloud(env, s.cloud_points, cloud_rng);
    const PreparedCloud cloud(cloud_points);
    const auto backend = make_backend(mode, cedf, s.links, cloud);

    std::optional<Outcome> done;
    if (rec.gt_clearance < 0.0) done = Outcome::collision;
    else if (rec.ee_goal_dist <= s.success_threshold) done = Outcome::success;
    else if (step >= s.t_max) done = Outcome::stuck;
    if (done) {
      rec.min_cedf = backend->min_distance(rec.q, forward_kinematics(rec.q, s.links));
      out.records.push_back(std::move(rec));
      out.outcome = *done;
      out.steps = step;
      return out;
    }

    const auto r = controller.step(x, goal, *backend, threads);
    rec.min_cedf = r.diag.min_distance;
    rec.cost = r.diag.best_terms;
    rec.solve_ms = r.diag.solve_ms;
    out.records.push_back(std::move(rec));
    step_dynamics_inplace(x, r.control, mcfg.tau);
    advance_obstacles(env, mcfg.tau);
  }
}

struct BenchmarkRow {
  std::string mode;
  double success = 0.0, collision = 0.0, stuck = 0.0;
  double mppi_ms_mean = 0.0, mppi_ms_sd = 0.0;
  std::vector<std::uint64_t> env_hashes;  // per seed
  std::vector<EpisodeResult> episodes;
};

/// Runs seeds base_seed .. base_seed+n_envs-1 for every mode. Episodes run in
/// parallel; each episode plans single-threaded, so results do not depend on
/// the thread count.
inline std::vector<BenchmarkRow> run_benchmark(std::size_t n_envs, std::uint64_t base_seed, const Scenario& tmpl,
                                               std::span<const ShapeMode> modes, const RobotCedf* cedf,
                                               std::size_t threads = 1,
                                               const std::function<void(const std::string&, std::size_t)>& progress = {}) {
  if (n_envs < 1) throw std::invalid_argument("run_benchmark needs n_envs >= 1");
  if (modes.empty()) throw std::invalid_argument("run_benchmark needs at least one shape mode");
  std::vector<BenchmarkRow> rows;
  for (const auto& mode : modes) {
    BenchmarkRow row;
    row.mode = mode.name();
    row.episodes.resize(n_envs);
    parallel_for(n_envs, threads, [&](std::size_t e) {
      Scenario s = tmpl;
      s.seed = base_seed + e;
      row.episodes[e] = run_episode(s, cedf, mode, 1);
      if (progress) progress(row.mode, e);
    });
    std::size_t counts[3] = {0, 0, 0};
    std::vector<double> times;
    for (const auto& ep : row.episodes) {
      ++counts[static_cast<int>(ep.outcome)];
      row.env_hashes.push_back(ep.env_hash);
      for (std::size_t k = 0; k < ep.steps; ++k) times.push_back(ep.records[k].solve_ms);
    }
    const auto n = static_cast<double>(n_envs);
    row.success = static_cast<double>(counts[0]) / n;
    row.collision = static_cast<double>(counts[1]) / n;
    row.stuck = static_cast<double>(counts[2]) / n;
    if (!times.empty()) {
      row.mppi_ms_mean = std::accumulate(times.begin(), times.end(), 0.0) / static_cast<double>(times.size());
      double var = 0.0;
      for (double t : times) var += (t - row.mppi_ms_mean) * (t - row.mppi_ms_mean);
      row.mppi_ms_sd = times.size() > 1 ? std::sqrt(var / static_cast<double>(times.size() - 1)) : 0.0;
    }
    if (!rows.empty() && rows.front().env_hashes != row.env_hashes)
      throw std::logic_error("benchmark modes saw different environments");
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace ncedf
