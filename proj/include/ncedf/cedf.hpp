#pragma once

// Whole-robot distance queries composed from per-link networks.
//
// Per-link values are floored at a geometric lower bound on the distance to
// the link: the larger of the distance to the link's training box and the
// distance to a chain of bounding spheres around the link's sub-arcs. The same
// spheres give conservative bounds for groups of cloud points, which lets
// cloud_min_distance skip (link, leaf) pairs that cannot hold the minimum
// while returning exactly what a per-point loop would.

#include "ncedf/datagen.hpp"
#include "ncedf/fast_mlp.hpp"
#include "ncedf/geometry.hpp"
#include "ncedf/kinematics.hpp"
#include "ncedf/mlp.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ncedf {

struct LinkModel {
  MlpParams params;
  LinkGeometry geometry;
  Aabb box = default_link_box();
};

class RobotCedf {
 public:
  RobotCedf() = default;

  /// One model per link.
  RobotCedf(std::vector<LinkModel> models, std::vector<LinkGeometry> geometries) : geometries_(std::move(geometries)) {
    if (geometries_.empty()) throw std::invalid_argument("robot needs at least one link");
    if (models.size() != geometries_.size())
      throw std::invalid_argument("need one model per link (" + std::to_string(geometries_.size()) + "), got " +
                                  std::to_string(models.size()));
    for (std::size_t i = 0; i < models.size(); ++i) {
      if (!(models[i].geometry == geometries_[i]))
        throw std::invalid_argument("link " + std::to_string(i) + " geometry differs from its model's training geometry");
      nets_.push_back(std::make_shared<const FastMlp>(models[i].params));
      boxes_.push_back(models[i].box);
    }
  }

  /// One model shared by every link.
  static RobotCedf shared(const LinkModel& model, const std::vector<LinkGeometry>& geometries) {
    return RobotCedf(std::vector<LinkModel>(geometries.size(), model), geometries);
  }

  std::size_t link_count() const { return geometries_.size(); }
  const std::vector<LinkGeometry>& geometries() const { return geometries_; }
  const FastMlp& net(std::size_t i) const { return *nets_.at(i); }
  const Aabb& box(std::size_t i) const { return boxes_.at(i); }

 private:
  std::vector<LinkGeometry> geometries_;
  std::vector<std::shared_ptr<const FastMlp>> nets_;
  std::vector<Aabb> boxes_;
};

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
};

inline constexpr std::size_t kLinkSubArcs = 4;

/// Spheres covering a link's body in its own frame. Sub-arc j spans
/// [jL/n, (j+1)L/n]; since its bend is at most π the backbone stays inside the
/// ball on its chord, and the tube adds the link radius.
inline std::array<Sphere, kLinkSubArcs> link_bounding_spheres(const LinkConfig& q, const LinkGeometry& geom) {
  std::array<Sphere, kLinkSubArcs> out;
  Vec3 a = Vec3::Zero();
  for (std::size_t j = 0; j < kLinkSubArcs; ++j) {
    const Vec3 b = backbone_point(q, geom.length, geom.length * static_cast<double>(j + 1) / kLinkSubArcs);
    out[j] = {0.5 * (a + b), 0.5 * (b - a).norm() + geom.radius};
    a = b;
  }
  return out;
}

/// Segment a-b swept by a ball of `radius`.
struct Capsule {
  Vec3 a = Vec3::Zero();
  Vec3 b = Vec3::Zero();
  double radius = 0.0;

  double distance(const Vec3& p) const {
    const Vec3 d = b - a;
    const double dd = d.squaredNorm();
    const double t = dd > 0.0 ? std::clamp((p - a).dot(d) / dd, 0.0, 1.0) : 0.0;
    return (p - a - t * d).norm() - radius;
  }
};

/// Capsules around the chords of the same sub-arcs. A sub-arc of angle α
/// stays within its sagitta ρ(1 − cos(α/2)) of the chord, so the capsule
/// radius is r plus that sagitta.
inline std::array<Capsule, kLinkSubArcs> link_bounding_capsules(const LinkConfig& q, const LinkGeometry& geom) {
  const double half_quarter = q.theta / (4.0 * kLinkSubArcs);
  const double sagitta = q.theta > 1e-12 ? 2.0 * (geom.length / q.theta) * std::sin(half_quarter) * std::sin(half_quarter) : 0.0;
  const double radius = geom.radius + sagitta + 1e-12 * geom.length;
  std::array<Capsule, kLinkSubArcs> out;
  Vec3 a = Vec3::Zero();
  for (std::size_t j = 0; j < kLinkSubArcs; ++j) {
    const Vec3 b = backbone_point(q, geom.length, geom.length * static_cast<double>(j + 1) / kLinkSubArcs);
    out[j] = {a, b, radius};
    a = b;
  }
  return out;
}

/// Capsule in float, laid out for SIMD distance evaluation.
struct CapsuleF {
  float ax = 0, ay = 0, az = 0;
  float dx = 0, dy = 0, dz = 0;
  float inv_dd = 0;
  float radius = 0;

  static CapsuleF from(const Capsule& c) {
    const Vec3 d = c.b - c.a;
    const double dd = d.squaredNorm();
    return {static_cast<float>(c.a.x()), static_cast<float>(c.a.y()), static_cast<float>(c.a.z()),
            static_cast<float>(d.x()),   static_cast<float>(d.y()),   static_cast<float>(d.z()),
            dd > 0.0 ? static_cast<float>(1.0 / dd) : 0.0f, static_cast<float>(c.radius)};
  }

  v16f distance(v16f x, v16f y, v16f z) const {
    const v16f ex = x - ax, ey = y - ay, ez = z - az;
    const v16f t = vmin(vmax((ex * dx + ey * dy + ez * dz) * inv_dd, splat(0.0f)), splat(1.0f));
    const v16f fx = ex - t * dx, fy = ey - t * dy, fz = ez - t * dz;
    return vsqrt(fx * fx + fy * fy + fz * fz) - radius;
  }
};

/// Cloud reorganised into leaves of at most 16 points for block evaluation.
class PreparedCloud {
 public:
  struct Leaf {
    Vec3 center = Vec3::Zero();
    double radius = 0.0;
  };

  PreparedCloud() = default;

  explicit PreparedCloud(std::span<const Vec3> points) : size_(points.size()) {
    if (points.empty()) throw std::invalid_argument("point cloud is empty");
    std::vector<std::uint32_t> order(points.size());
    std::iota(order.begin(), order.end(), 0u);
    split(points, order, 0, order.size());
    // Leaf centres and radii, 16 leaves per vector; padding lanes sit far away.
    const std::size_t groups = (leaves_.size() + kLanes - 1) / kLanes;
    leaf_x_.assign(groups, splat(kFar));
    leaf_y_.assign(groups, splat(kFar));
    leaf_z_.assign(groups, splat(kFar));
    leaf_r_.assign(groups, splat(0.0f));
    for (std::size_t l = 0; l < leaves_.size(); ++l) {
      const std::size_t g = l / kLanes;
      const int lane = static_cast<int>(l % kLanes);
      leaf_x_[g][lane] = static_cast<float>(leaves_[l].center.x());
      leaf_y_[g][lane] = static_cast<float>(leaves_[l].center.y());
      leaf_z_[g][lane] = static_cast<float>(leaves_[l].center.z());
      leaf_r_[g][lane] = static_cast<float>(leaves_[l].radius);
    }
  }

  static constexpr float kFar = 1e15f;

  /// Leaf centres in groups of 16 (leaf l is lane l % 16 of group l / 16).
  std::size_t leaf_groups() const { return leaf_x_.size(); }
  const v16f& leaf_xs(std::size_t g) const { return leaf_x_[g]; }
  const v16f& leaf_ys(std::size_t g) const { return leaf_y_[g]; }
  const v16f& leaf_zs(std::size_t g) const { return leaf_z_[g]; }
  const v16f& leaf_radii(std::size_t g) const { return leaf_r_[g]; }

  std::size_t size() const { return size_; }
  std::size_t leaf_count() const { return leaves_.size(); }
  const Leaf& leaf(std::size_t l) const { return leaves_[l]; }
  const v16f& xs(std::size_t l) const { return x_[l]; }
  const v16f& ys(std::size_t l) const { return y_[l]; }
  const v16f& zs(std::size_t l) const { return z_[l]; }
  const std::array<std::uint32_t, kLanes>& indices(std::size_t l) const { return index_[l]; }

 private:
  void split(std::span<const Vec3> pts, std::vector<std::uint32_t>& order, std::size_t begin, std::size_t end) {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (std::size_t i = begin; i < end; ++i) {
      lo = lo.cwiseMin(pts[order[i]]);
      hi = hi.cwiseMax(pts[order[i]]);
    }
    if (end - begin <= static_cast<std::size_t>(kLanes)) {
      emit_leaf(pts, order, begin, end, 0.5 * (lo + hi));
      return;
    }
    Eigen::Index axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(mid),
                     order.begin() + static_cast<std::ptrdiff_t>(end), [&](std::uint32_t a, std::uint32_t b) {
                       const double pa = pts[a][axis], pb = pts[b][axis];
                       return pa < pb || (pa == pb && a < b);
                     });
    split(pts, order, begin, mid);
    split(pts, order, mid, end);
  }

  void emit_leaf(std::span<const Vec3> pts, const std::vector<std::uint32_t>& order, std::size_t begin, std::size_t end,
                 const Vec3& center) {
    Leaf leaf{center, 0.0};
    v16f x{}, y{}, z{};
    std::array<std::uint32_t, kLanes> idx{};
    for (int lane = 0; lane < kLanes; ++lane) {
      // Pad with the first point of the leaf; duplicates carry the same index.
      const std::size_t k = begin + static_cast<std::size_t>(lane) < end ? begin + static_cast<std::size_t>(lane) : begin;
      const Vec3& p = pts[order[k]];
      x[lane] = static_cast<float>(p.x());
      y[lane] = static_cast<float>(p.y());
      z[lane] = static_cast<float>(p.z());
      idx[static_cast<std::size_t>(lane)] = order[k];
      leaf.radius = std::max(leaf.radius, (p - center).norm());
    }
    leaves_.push_back(leaf);
    x_.push_back(x);
    y_.push_back(y);
    z_.push_back(z);
    index_.push_back(idx);
  }

  std::size_t size_ = 0;
  std::vector<Leaf> leaves_;
  std::vector<v16f> x_, y_, z_;
  std::vector<std::array<std::uint32_t, kLanes>> index_;
  std::vector<v16f> leaf_x_, leaf_y_, leaf_z_, leaf_r_;
};

/// Robot state prepared for distance queries at one configuration.
class ConfiguredRobot {
 public:
  struct LinkState {
    std::array<float, 9> rt{};  // R^T, row-major
    std::array<float, 3> t{};
    std::array<float, FastMlp::kMaxWidth> constants{};
    std::array<Capsule, kLinkSubArcs> capsules_world;
    std::array<CapsuleF, kLinkSubArcs> capsules_worldf;
    std::array<CapsuleF, kLinkSubArcs> capsules_local;
    std::array<float, 6> box{};                          // min, max
    const FastMlp* net = nullptr;
  };

  /// `fk` must be forward_kinematics(q) (possibly composed with a fixed base frame).
  ConfiguredRobot(const RobotCedf& cedf, const RobotConfig& q, std::span<const Pose> fk) {
    const std::size_t m = cedf.link_count();
    if (q.size() != m) throw std::invalid_argument("configuration has " + std::to_string(q.size()) + " links, model has " +
                                                   std::to_string(m));
    if (fk.size() != m + 1) throw std::invalid_argument("forward kinematics has the wrong number of poses");
    links_.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      LinkState& s = links_[i];
      const Pose& base = fk[i];
      const Eigen::Matrix3d r = base.linear();
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) s.rt[static_cast<std::size_t>(3 * a + b)] = static_cast<float>(r(b, a));
        s.t[static_cast<std::size_t>(a)] = static_cast<float>(base.translation()[a]);
      }
      s.net = &cedf.net(i);
      s.net->config_constants(q[i], s.constants.data());
      const auto local = link_bounding_capsules(q[i], cedf.geometries()[i]);
      for (std::size_t j = 0; j < kLinkSubArcs; ++j) {
        s.capsules_world[j] = {base * local[j].a, base * local[j].b, local[j].radius};
        s.capsules_worldf[j] = CapsuleF::from(s.capsules_world[j]);
        s.capsules_local[j] = CapsuleF::from(local[j]);
      }
      const Aabb& box = cedf.box(i);
      for (int a = 0; a < 3; ++a) {
        s.box[static_cast<std::size_t>(a)] = static_cast<float>(box.min[a]);
        s.box[static_cast<std::size_t>(3 + a)] = static_cast<float>(box.max[a]);
      }
    }
  }

  std::size_t link_count() const { return links_.size(); }
  const LinkState& link(std::size_t i) const { return links_[i]; }

  /// Lower bound on every per-link value of points within `radius` of `center`.
  double lower_bound(std::size_t i, const Vec3& center, double radius) const {
    double lb = std::numeric_limits<double>::infinity();
    for (const auto& c : links_[i].capsules_world) lb = std::min(lb, c.distance(center));
    return lb - radius - kBoundMargin;
  }

  /// lower_bound for 16 leaves at once (leaf group `g` of `cloud`).
  v16f leaf_bounds(std::size_t i, const PreparedCloud& cloud, std::size_t g) const {
    const v16f x = cloud.leaf_xs(g), y = cloud.leaf_ys(g), z = cloud.leaf_zs(g);
    const auto& caps = links_[i].capsules_worldf;
    v16f lb = caps[0].distance(x, y, z);
    for (std::size_t j = 1; j < kLinkSubArcs; ++j) lb = vmin(lb, caps[j].distance(x, y, z));
    return lb - cloud.leaf_radii(g) - static_cast<float>(kBoundMargin);
  }

  /// Link-frame coordinates of 16 world points and the geometric floor there
  /// (distance to the training box, and to the capsules around the link).
  struct Block {
    v16f x, y, z, floor;
  };

  Block link_floor(std::size_t i, v16f xw, v16f yw, v16f zw) const {
    const LinkState& s = links_[i];
    const v16f dx = xw - s.t[0], dy = yw - s.t[1], dz = zw - s.t[2];
    Block b;
    b.x = s.rt[0] * dx + s.rt[1] * dy + s.rt[2] * dz;
    b.y = s.rt[3] * dx + s.rt[4] * dy + s.rt[5] * dz;
    b.z = s.rt[6] * dx + s.rt[7] * dy + s.rt[8] * dz;
    const v16f zero = splat(0.0f);
    const v16f bx = vmax(vmax(s.box[0] - b.x, b.x - s.box[3]), zero);
    const v16f by = vmax(vmax(s.box[1] - b.y, b.y - s.box[4]), zero);
    const v16f bz = vmax(vmax(s.box[2] - b.z, b.z - s.box[5]), zero);
    v16f tube = s.capsules_local[0].distance(b.x, b.y, b.z);
    for (std::size_t j = 1; j < kLinkSubArcs; ++j) tube = vmin(tube, s.capsules_local[j].distance(b.x, b.y, b.z));
    b.floor = vmax(vsqrt(bx * bx + by * by + bz * bz), tube);
    return b;
  }

  /// max(network, floor) for a block from link_floor; `floored` flags lanes
  /// where the floor exceeded the network output.
  v16f link_values(std::size_t i, const Block& b, v16f* floored = nullptr) const {
    const LinkState& s = links_[i];
    const v16f net = s.net->evaluate(s.constants.data(), b.x, b.y, b.z);
    if (floored) *floored = b.floor > net ? splat(1.0f) : splat(0.0f);
    return vmax(net, b.floor);
  }

  v16f link_values(std::size_t i, v16f xw, v16f yw, v16f zw, v16f* floored = nullptr) const {
    return link_values(i, link_floor(i, xw, yw, zw), floored);
  }

  static constexpr double kBoundMargin = 1e-4;

 private:
  std::vector<LinkState> links_;
};

struct LinkDistance {
  double value = 0.0;
  bool floored = false;
};

namespace detail {
inline LinkDistance single_point(const ConfiguredRobot& robot, std::size_t i, const Vec3& p) {
  v16f flag;
  const v16f v = robot.link_values(i, splat(static_cast<float>(p.x())), splat(static_cast<float>(p.y())),
                                   splat(static_cast<float>(p.z())), &flag);
  return {static_cast<double>(v[0]), flag[0] != 0.0f};
}
}  // namespace detail

/// Per-link value at a world point; `link` is 0-based.
inline LinkDistance link_distance_world(const RobotCedf& cedf, std::size_t link, const Vec3& p_world,
                                        const RobotConfig& q, std::span<const Pose> fk) {
  if (link >= cedf.link_count())
    throw std::out_of_range("link index " + std::to_string(link) + " out of range for " +
                            std::to_string(cedf.link_count()) + " links");
  return detail::single_point(ConfiguredRobot(cedf, q, fk), link, p_world);
}

struct RobotDistance {
  double value = std::numeric_limits<double>::infinity();
  std::size_t link = 0;
  bool floored = false;
};

inline RobotDistance robot_distance_detail(const ConfiguredRobot& robot, const Vec3& p_world) {
  RobotDistance best;
  for (std::size_t i = 0; i < robot.link_count(); ++i) {
    const auto d = detail::single_point(robot, i, p_world);
    if (d.value < best.value) best = {d.value, i, d.floored};
  }
  return best;
}

inline double robot_distance(const RobotCedf& cedf, const Vec3& p_world, const RobotConfig& q,
                             std::span<const Pose> fk) {
  return robot_distance_detail(ConfiguredRobot(cedf, q, fk), p_world).value;
}

struct CloudDistance {
  double distance = std::numeric_limits<double>::infinity();
  std::size_t index = 0;  // first point attaining the minimum
  std::size_t link = 0;
  bool floored = false;
  std::size_t blocks_evaluated = 0;
};

/// Minimum robot distance over a prepared cloud at a prepared configuration.
inline CloudDistance cloud_min_distance(const ConfiguredRobot& robot, const PreparedCloud& cloud) {
  const std::size_t m = robot.link_count(), n_leaves = cloud.leaf_count(), groups = cloud.leaf_groups();
  const std::size_t stride = groups * kLanes;
  thread_local std::vector<float> bounds;
  bounds.resize(m * stride);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t g = 0; g < groups; ++g) {
      const v16f b = robot.leaf_bounds(i, cloud, g);
      std::memcpy(&bounds[i * stride + g * kLanes], &b, sizeof(b));
    }
  std::size_t first = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < n_leaves; ++l)
      if (bounds[i * stride + l] < bounds[first]) first = i * stride + l;

  CloudDistance best;
  best.index = std::numeric_limits<std::size_t>::max();
  auto visit = [&](std::size_t k) {
    const std::size_t i = k / stride, l = k % stride;
    const auto block = robot.link_floor(i, cloud.xs(l), cloud.ys(l), cloud.zs(l));
    float floor_min = block.floor[0];
    for (int lane = 1; lane < kLanes; ++lane) floor_min = std::min(floor_min, block.floor[lane]);
    if (static_cast<double>(floor_min) > best.distance) return;
    v16f flags;
    const v16f v = robot.link_values(i, block, &flags);
    ++best.blocks_evaluated;
    const auto& idx = cloud.indices(l);
    for (int lane = 0; lane < kLanes; ++lane) {
      const double d = static_cast<double>(v[lane]);
      const std::size_t id = idx[static_cast<std::size_t>(lane)];
      // Link order matters for ties at the same point: keep the lowest link.
      if (d < best.distance || (d == best.distance && (id < best.index || (id == best.index && i < best.link)))) {
        best.distance = d;
        best.index = id;
        best.link = i;
        best.floored = flags[lane] != 0.0f;
      }
    }
  };
  visit(first);
  // Remaining pairs in increasing bound order, until no bound can beat the best.
  thread_local std::vector<std::pair<float, std::uint32_t>> pending;
  pending.clear();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < n_leaves; ++l) {
      const std::size_t k = i * stride + l;
      if (k != first && !(static_cast<double>(bounds[k]) > best.distance))
        pending.emplace_back(bounds[k], static_cast<std::uint32_t>(k));
    }
  std::sort(pending.begin(), pending.end());
  for (const auto& [b, k] : pending) {
    if (static_cast<double>(b) > best.distance) break;
    visit(k);
  }
  return best;
}

inline CloudDistance cloud_min_distance(const RobotCedf& cedf, const PreparedCloud& cloud, const RobotConfig& q) {
  std::vector<Pose> fk;
  forward_kinematics(q, cedf.geometries(), fk);
  return cloud_min_distance(ConfiguredRobot(cedf, q, fk), cloud);
}

inline CloudDistance cloud_min_distance(const RobotCedf& cedf, std::span<const Vec3> cloud, const RobotConfig& q) {
  if (cloud.empty()) throw std::invalid_argument("cloud_min_distance: empty cloud");
  return cloud_min_distance(cedf, PreparedCloud(cloud), q);
}

}  // namespace ncedf
