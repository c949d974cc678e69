#include "ncedf/mppi.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace ncedf;

namespace {

class FixedDistance final : public CollisionBackend {
 public:
  explicit FixedDistance(double d) : d_(d) {}
  double min_distance(const RobotConfig&, std::span<const Pose>) const override { return d_; }

 private:
  double d_;
};

/// Distance from a single obstacle point to the robot backbone tip, enough to
/// make the collision cost depend on the configuration.
class TipDistance final : public CollisionBackend {
 public:
  explicit TipDistance(Vec3 p) : p_(std::move(p)) {}
  double min_distance(const RobotConfig&, std::span<const Pose> fk) const override {
    return (fk.back().translation() - p_).norm();
  }

 private:
  Vec3 p_;
};

std::vector<LinkGeometry> links(std::size_t m) { return std::vector<LinkGeometry>(m); }

MppiConfig small_config(std::size_t n = 64, std::size_t h = 8) {
  MppiConfig c;
  c.n_rollouts = n;
  c.horizon = h;
  c.seed = 42;
  return c;
}

ControlSequence random_projected(std::size_t horizon, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  auto u = ControlSequence::zeros(horizon, dim);
  for (auto& v : u.values) v = rng.uniform(-0.3, 0.3);
  for (std::size_t t = 0; t < horizon; ++t) project_control_inplace(u.step(t));
  return u;
}

}  // namespace

TEST(MppiConfig, DefaultsMatchThePaperSettings) {
  const MppiConfig c;
  EXPECT_EQ(c.n_rollouts, 800u);
  EXPECT_EQ(c.horizon, 20u);
  EXPECT_DOUBLE_EQ(c.sigma * c.sigma, 0.05);
  EXPECT_DOUBLE_EQ(c.lambda, 0.02);
  EXPECT_DOUBLE_EQ(c.w_goal, 12.0);
  EXPECT_DOUBLE_EQ(c.w_coll, 1.1);
  EXPECT_DOUBLE_EQ(c.w_state, 50.0);
  EXPECT_DOUBLE_EQ(c.safety_margin, 0.05);
  EXPECT_DOUBLE_EQ(c.tau, 0.05);
  EXPECT_NO_THROW(c.validate());
}

TEST(MppiConfig, RejectsInvalidValues) {
  auto bad = [](auto mutate) {
    MppiConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), std::invalid_argument);
  };
  bad([](MppiConfig& c) { c.n_rollouts = 0; });
  bad([](MppiConfig& c) { c.horizon = 0; });
  bad([](MppiConfig& c) { c.lambda = 0.0; });
  bad([](MppiConfig& c) { c.epsilon = 0.0; });
  bad([](MppiConfig& c) { c.alpha_u = 1.0; });
  bad([](MppiConfig& c) { c.alpha_u = 0.0; });
  bad([](MppiConfig& c) { c.sigma = -1.0; });
}

TEST(SampleRollouts, ZeroSigmaReproducesReference) {
  auto cfg = small_config(5, 4);
  cfg.sigma = 0.0;
  const auto ref = random_projected(4, 6, 1);
  for (const auto& u : sample_rollouts(ref, cfg, 3)) {
    ASSERT_EQ(u.values.size(), ref.values.size());
    for (std::size_t i = 0; i < u.values.size(); ++i) EXPECT_NEAR(u.values[i], ref.values[i], 1e-15);
  }
}

TEST(SampleRollouts, EmpiricalMeanNearReference) {
  auto cfg = small_config(10000, 2);
  const auto ref = random_projected(2, 6, 2);
  const auto samples = sample_rollouts(ref, cfg, 0);
  for (std::size_t i = 0; i < ref.values.size(); ++i) {
    double mean = 0.0;
    for (const auto& u : samples) mean += u.values[i];
    mean /= static_cast<double>(samples.size());
    EXPECT_LT(std::abs(mean - ref.values[i]), 4.0 * cfg.sigma / 100.0) << "channel " << i;
  }
}

TEST(SampleRollouts, EverySampleIsProjected) {
  const auto cfg = small_config(50, 6);
  for (const auto& u : sample_rollouts(random_projected(6, 9, 3), cfg, 7)) EXPECT_TRUE(u.is_projected(1e-12));
}

TEST(SampleRollouts, AddressedByIterationAndIndex) {
  const auto cfg = small_config(20, 5);
  const auto ref = ControlSequence::zeros(5, 6);
  const auto all = sample_rollouts(ref, cfg, 9);
  EXPECT_EQ(sample_rollout(ref, cfg, 9, 13), all[13]);
  EXPECT_NE(sample_rollout(ref, cfg, 10, 13), all[13]);
  EXPECT_NE(all[12], all[13]);
  auto other = cfg;
  other.seed = 43;
  EXPECT_NE(sample_rollout(ref, other, 9, 13), all[13]);
}

TEST(RolloutStates, ZeroControlIsConstant) {
  const auto geoms = links(3);
  ArcLengths x0 = ArcLengths::straight(geoms);
  x0.link(1)[0] += 0.1;
  x0.link(1)[1] -= 0.1;
  const auto r = rollout_states(x0, ControlSequence::zeros(6, 9), geoms, 0.05);
  ASSERT_EQ(r.configs.size(), 7u);
  ASSERT_EQ(r.arcs.size(), 7u);
  for (std::size_t k = 0; k <= 6; ++k) {
    EXPECT_EQ(r.arcs[k], x0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.configs[k][i], r.configs[0][i]);
  }
}

TEST(RolloutStates, StepsComposeDynamicsAndInverseKinematics) {
  const auto geoms = links(2);
  const ArcLengths x0 = ArcLengths::straight(geoms);
  const auto U = random_projected(5, 6, 4);
  const auto r = rollout_states(x0, U, geoms, 0.05);
  ArcLengths x = x0;
  for (std::size_t t = 0; t < 5; ++t) {
    x = step_dynamics(x, U.step(t), 0.05);
    EXPECT_EQ(r.arcs[t + 1], x);
    const auto q = arc_lengths_to_robot_config(x, geoms);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(r.configs[t + 1][i], q[i]);
  }
  // One step: l += u·τ.
  for (std::size_t c = 0; c < 6; ++c) EXPECT_DOUBLE_EQ(r.arcs[1].values[c], x0.values[c] + U.step(0)[c] * 0.05);
}

TEST(RolloutStates, PerLinkMeanStaysConstant) {
  const auto geoms = links(4);
  const auto r = rollout_states(ArcLengths::straight(geoms), random_projected(20, 12, 5), geoms, 0.05);
  for (const auto& x : r.arcs)
    for (std::size_t i = 0; i < 4; ++i) {
      const auto l = x.link(i);
      EXPECT_NEAR((l[0] + l[1] + l[2]) / 3.0, 2.0, 1e-14);
    }
}

TEST(CostGoal, ZeroWhenAtGoal) {
  const auto geoms = links(2);
  const auto q = arc_lengths_to_robot_config(ArcLengths::straight(geoms), geoms);
  const std::vector<RobotConfig> Q(6, q);
  EXPECT_EQ(cost_goal(Q, geoms, forward_kinematics(q, geoms).back(), 12.0), 0.0);
}

TEST(CostGoal, UnitTranslationCostsWeightTimesHorizon) {
  const auto geoms = links(2);
  const auto q = arc_lengths_to_robot_config(ArcLengths::straight(geoms), geoms);
  Pose goal = forward_kinematics(q, geoms).back();
  goal.translation() += Vec3(1.0, 0.0, 0.0);
  const std::size_t H = 7;
  const std::vector<RobotConfig> Q(H + 1, q);
  EXPECT_NEAR(cost_goal(Q, geoms, goal, 12.0), 12.0 * H, 1e-12);
  EXPECT_NEAR(cost_goal(Q, geoms, goal, 3.0), 3.0 * H, 1e-12);
  EXPECT_DOUBLE_EQ(goal_term(Pose::Identity(), Pose(Eigen::Translation3d(1.0, 0.0, 0.0)), 1.0), 1.0);
}

TEST(CostCollision, DirectEvaluationAndSaturation) {
  MppiConfig cfg;
  cfg.w_coll = 1.0;
  EXPECT_NEAR(collision_term(0.55, cfg), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(collision_term(0.05, cfg), 1.0 / cfg.epsilon);
  EXPECT_DOUBLE_EQ(collision_term(-1.0, cfg), 1.0 / cfg.epsilon);
  double prev = collision_term(-0.5, cfg);
  for (double d = -0.5; d < 3.0; d += 0.01) {
    const double c = collision_term(d, cfg);
    EXPECT_LE(c, prev);
    prev = c;
  }
  const auto geoms = links(1);
  const std::vector<RobotConfig> Q(5, arc_lengths_to_robot_config(ArcLengths::straight(geoms), geoms));
  EXPECT_NEAR(cost_collision(Q, geoms, FixedDistance(0.55), cfg), 4 * 2.0, 1e-12);
}

TEST(CostState, PenalizesOnlyOutOfRangeChambers) {
  const auto geoms = links(2);
  ArcLengths x = ArcLengths::straight(geoms);
  EXPECT_EQ(state_term(x, geoms, 50.0), 0.0);
  x.link(1)[2] = 2.5;
  EXPECT_NEAR(state_term(x, geoms, 50.0), 5.0, 1e-12);
  ArcLengths y = ArcLengths::straight(geoms);
  y.link(0)[0] = 1.5;
  EXPECT_NEAR(state_term(y, geoms, 50.0), state_term(x, geoms, 50.0), 1e-12);
  // Summed over k = 0..H-1 only.
  const std::vector<ArcLengths> X{x, ArcLengths::straight(geoms), y};
  EXPECT_NEAR(cost_state(X, geoms, 50.0), 5.0, 1e-12);
}

TEST(MppiUpdate, EqualCostsGiveTheSampleMean) {
  const auto ref = random_projected(3, 6, 6);
  std::vector<ControlSequence> rollouts;
  for (int j = 0; j < 5; ++j) rollouts.push_back(random_projected(3, 6, 10 + j));
  const std::vector<double> costs(5, 7.25);
  const auto out = mppi_update(costs, rollouts, ref, 0.02, 0.9);
  for (std::size_t i = 0; i < ref.values.size(); ++i) {
    double mean = 0.0;
    for (const auto& u : rollouts) mean += u.values[i] / 5.0;
    EXPECT_NEAR(out.values[i], 0.1 * ref.values[i] + 0.9 * mean, 1e-14);
  }
}

TEST(MppiUpdate, SingleRolloutBlendsWithReference) {
  const auto ref = random_projected(4, 3, 7);
  const auto u = random_projected(4, 3, 8);
  const auto out = mppi_update(std::vector<double>{3.0}, std::vector<ControlSequence>{u}, ref, 0.02, 0.7);
  for (std::size_t i = 0; i < ref.values.size(); ++i) EXPECT_NEAR(out.values[i], 0.3 * ref.values[i] + 0.7 * u.values[i], 1e-15);
}

TEST(MppiUpdate, SoftmaxWeightRatio) {
  const auto ref = random_projected(2, 3, 9);
  const auto best = random_projected(2, 3, 10);
  const auto worst = random_projected(2, 3, 11);
  const auto out = mppi_update(std::vector<double>{1.0, 2.0}, std::vector<ControlSequence>{best, worst}, ref, 0.02, 0.9);
  const double w = std::exp(-50.0);
  for (std::size_t i = 0; i < ref.values.size(); ++i) {
    const double exact = 0.1 * ref.values[i] + 0.9 * (best.values[i] + w * worst.values[i]) / (1.0 + w);
    EXPECT_NEAR(out.values[i], exact, 1e-15);
    EXPECT_NEAR(out.values[i], 0.1 * ref.values[i] + 0.9 * best.values[i], 1e-15);
  }
}

TEST(MppiUpdate, InvariantToAffineCostChanges) {
  std::mt19937_64 rng(12);
  const auto ref = random_projected(3, 6, 13);
  std::vector<ControlSequence> rollouts;
  std::vector<double> costs;
  for (int j = 0; j < 30; ++j) {
    rollouts.push_back(random_projected(3, 6, 100 + j));
    costs.push_back(100.0 * uniform01(rng));
  }
  const auto base = mppi_update(costs, rollouts, ref, 0.02, 0.9);
  for (int trial = 0; trial < 20; ++trial) {
    const double a = 0.01 + 100.0 * uniform01(rng), b = -500.0 + 1000.0 * uniform01(rng);
    std::vector<double> shifted;
    for (double c : costs) shifted.push_back(a * c + b);
    const auto out = mppi_update(shifted, rollouts, ref, 0.02, 0.9);
    for (std::size_t i = 0; i < out.values.size(); ++i) EXPECT_NEAR(out.values[i], base.values[i], 1e-12);
  }
}

TEST(MppiUpdate, OutputIsProjected) {
  ControlSequence ref = ControlSequence::zeros(2, 3);
  ControlSequence u = ControlSequence::zeros(2, 3);
  u.values = {1, 2, 3, 4, 5, 9};  // deliberately not projected
  const auto out = mppi_update(std::vector<double>{0.0}, std::vector<ControlSequence>{u}, ref, 0.02, 0.5);
  EXPECT_TRUE(out.is_projected(1e-15));
}

TEST(MppiUpdate, RejectsMismatchedInputs) {
  const auto ref = ControlSequence::zeros(2, 3);
  EXPECT_THROW(mppi_update(std::vector<double>{}, std::vector<ControlSequence>{}, ref, 0.02, 0.9), std::invalid_argument);
  EXPECT_THROW(mppi_update(std::vector<double>{1.0, 2.0}, std::vector<ControlSequence>{ref}, ref, 0.02, 0.9),
               std::invalid_argument);
}

TEST(MppiStep, WarmStartIsShiftedWithZeroPadding) {
  const auto geoms = links(2);
  const auto cfg = small_config(32, 6);
  const ArcLengths x = ArcLengths::straight(geoms);
  Pose goal = forward_kinematics(arc_lengths_to_robot_config(x, geoms), geoms).back();
  goal.translation() += Vec3(0.5, 0.0, -0.3);
  const auto r = mppi_step(x, geoms, goal, FixedDistance(5.0), cfg, ControlSequence::zeros(6, 6), 0);
  ASSERT_EQ(r.next_warm.horizon(), 6u);
  for (std::size_t t = 0; t + 1 < 6; ++t)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(r.next_warm.step(t)[c], r.updated.step(t + 1)[c]);
  for (double v : r.next_warm.step(5)) EXPECT_EQ(v, 0.0);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(r.control[c], r.updated.step(0)[c]);
  EXPECT_TRUE(r.updated.is_projected(1e-12));
}

TEST(MppiStep, StaysNearlyStillAtTheGoal) {
  const auto geoms = links(4);
  auto cfg = small_config(256, 20);
  const ArcLengths x = ArcLengths::straight(geoms);
  const Pose goal = forward_kinematics(arc_lengths_to_robot_config(x, geoms), geoms).back();
  const auto zero = ControlSequence::zeros(20, 12);
  const auto r = mppi_step(x, geoms, goal, FixedDistance(10.0), cfg, zero, 0);
  double executed = 0.0;
  for (double v : r.control) executed += v * v;
  // Typical magnitude of one sampled first control: projected noise has
  // variance 2σ²/3 per channel.
  const double sampled = 12.0 * 2.0 * cfg.sigma * cfg.sigma / 3.0;
  EXPECT_LT(executed, 0.25 * sampled);
  for (double v : r.control) EXPECT_LT(std::abs(v), cfg.alpha_u * cfg.sigma);
}

TEST(MppiStep, MovesTowardAReachableGoal) {
  const auto geoms = links(2);
  auto cfg = small_config(256, 20);
  ArcLengths target = ArcLengths::straight(geoms);
  target.link(0)[0] += 0.2;
  target.link(0)[1] -= 0.1;
  target.link(0)[2] -= 0.1;
  const Pose goal = forward_kinematics(arc_lengths_to_robot_config(target, geoms), geoms).back();
  MppiController ctl(cfg, geoms);
  ArcLengths x = ArcLengths::straight(geoms);
  const double start = frobenius_distance(forward_kinematics(arc_lengths_to_robot_config(x, geoms), geoms).back(), goal);
  for (int k = 0; k < 40; ++k) step_dynamics_inplace(x, ctl.step(x, goal, FixedDistance(10.0)).control, cfg.tau);
  const double end = frobenius_distance(forward_kinematics(arc_lengths_to_robot_config(x, geoms), geoms).back(), goal);
  EXPECT_LT(end, 0.5 * start);
  EXPECT_EQ(ctl.iteration(), 40u);
}

TEST(MppiStep, CostsAreNonNegativeAndSumToTotal) {
  const auto geoms = links(2);
  const auto cfg = small_config(16, 5);
  const ArcLengths x = ArcLengths::straight(geoms);
  const Pose goal(Eigen::Translation3d(1.0, 1.0, 2.0));
  const TipDistance backend(Vec3(0.5, 0.0, 3.5));
  const auto rollouts = sample_rollouts(ControlSequence::zeros(5, 6), cfg, 0);
  for (const auto& U : rollouts) {
    const auto r = evaluate_rollout(x, U, geoms, goal, backend, cfg);
    EXPECT_GE(r.cost.goal, 0.0);
    EXPECT_GE(r.cost.coll, 0.0);
    EXPECT_GE(r.cost.state, 0.0);
    EXPECT_EQ(r.total, r.cost.goal + r.cost.coll + r.cost.state);
    // Agrees with the separately defined cost functions.
    EXPECT_NEAR(r.cost.goal, cost_goal(r.configs, geoms, goal, cfg.w_goal), 1e-9);
    EXPECT_NEAR(r.cost.coll, cost_collision(r.configs, geoms, backend, cfg), 1e-9);
    EXPECT_NEAR(r.cost.state, cost_state(r.arcs, geoms, cfg.w_state), 1e-9);
    EXPECT_EQ(r.configs.front()[0], arc_lengths_to_robot_config(x, geoms)[0]);
  }
  const auto step = mppi_step(x, geoms, goal, backend, cfg, ControlSequence::zeros(5, 6), 0);
  const auto best = evaluate_rollout(x, rollouts[step.diag.best_index], geoms, goal, backend, cfg);
  EXPECT_NEAR(step.diag.best_cost, best.total, 1e-9 * best.total);
  EXPECT_LE(step.diag.best_cost, step.diag.mean_cost);
  EXPECT_DOUBLE_EQ(step.diag.min_distance, backend.min_distance(arc_lengths_to_robot_config(x, geoms),
                                                                forward_kinematics(arc_lengths_to_robot_config(x, geoms), geoms)));
}

TEST(MppiStep, BitReproducibleAcrossRunsAndThreads) {
  const auto geoms = links(3);
  const auto cfg = small_config(48, 10);
  ArcLengths x = ArcLengths::straight(geoms);
  x.link(0)[0] += 0.1;
  x.link(0)[2] -= 0.1;
  const Pose goal(Eigen::Translation3d(1.5, -1.0, 4.0));
  const TipDistance backend(Vec3(0.3, 0.2, 5.0));
  const auto warm = random_projected(10, 9, 14);
  const auto a = mppi_step(x, geoms, goal, backend, cfg, warm, 5, 1);
  const auto b = mppi_step(x, geoms, goal, backend, cfg, warm, 5, 1);
  const auto c = mppi_step(x, geoms, goal, backend, cfg, warm, 5, 4);
  EXPECT_EQ(a.updated, b.updated);
  EXPECT_EQ(a.updated, c.updated);
  EXPECT_EQ(a.diag.best_cost, c.diag.best_cost);
  EXPECT_EQ(a.diag.mean_cost, c.diag.mean_cost);
  const auto d = mppi_step(x, geoms, goal, backend, cfg, warm, 6, 1);
  EXPECT_NE(a.updated, d.updated);
}

TEST(MppiStep, RejectsMismatchedShapes) {
  const auto geoms = links(2);
  const auto cfg = small_config(4, 5);
  const ArcLengths x = ArcLengths::straight(geoms);
  EXPECT_THROW(mppi_step(x, geoms, Pose::Identity(), FixedDistance(1.0), cfg, ControlSequence::zeros(4, 6), 0),
               std::invalid_argument);
  EXPECT_THROW(mppi_step(x, geoms, Pose::Identity(), FixedDistance(1.0), cfg, ControlSequence::zeros(5, 9), 0),
               std::invalid_argument);
}

TEST(MppiController, ConservesBackboneLength) {
  const auto geoms = links(3);
  auto cfg = small_config(16, 5);
  MppiController ctl(cfg, geoms);
  ArcLengths x = ArcLengths::straight(geoms);
  const Pose goal(Eigen::Translation3d(2.0, 1.0, 3.0));
  for (int k = 0; k < 300; ++k) step_dynamics_inplace(x, ctl.step(x, goal, FixedDistance(3.0)).control, cfg.tau);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto l = x.link(i);
    EXPECT_NEAR((l[0] + l[1] + l[2]) / 3.0, 2.0, 1e-6);
  }
  ctl.reset();
  EXPECT_EQ(ctl.iteration(), 0u);
  EXPECT_EQ(ctl.warm_start(), ControlSequence::zeros(5, 9));
}

TEST(Backends, NcedfMatchesCloudQuery) {
  const auto geoms = links(2);
  std::mt19937_64 rng(15);
  const LinkModel model{glorot_init(NetShape{2, 8}.layer_dims(), rng), LinkGeometry{}, default_link_box()};
  const auto cedf = RobotCedf::shared(model, geoms);
  std::vector<Vec3> pts;
  for (int i = 0; i < 40; ++i) pts.emplace_back(-3.0 + 6.0 * uniform01(rng), -3.0 + 6.0 * uniform01(rng), 5.0 * uniform01(rng));
  const PreparedCloud cloud(pts);
  const NcedfBackend backend(cedf, cloud);
  ArcLengths x = ArcLengths::straight(geoms);
  x.link(1)[0] += 0.2;
  x.link(1)[1] -= 0.2;
  const auto q = arc_lengths_to_robot_config(x, geoms);
  EXPECT_EQ(backend.min_distance(q, forward_kinematics(q, geoms)), cloud_min_distance(cedf, cloud, q).distance);
  EXPECT_THROW(NcedfBackend(cedf, PreparedCloud(std::vector<Vec3>{})), std::invalid_argument);
}
