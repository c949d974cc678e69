#pragma once

// Baseline robot-shape representations: a chain of spheres along each
// backbone, and a point cloud sampled on the robot surface.

#include "ncedf/cedf.hpp"
#include "ncedf/geometry.hpp"
#include "ncedf/kinematics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace ncedf {

inline constexpr double kSphereMinInflation = 1.2;

/// Radius factor (times the link radius) that makes k backbone spheres cover
/// the whole tube for any bend up to π. A surface point is at most
/// δ = L/(2(k-1)) of arc from a centre; on an arc of curvature κ ≤ π/L its
/// squared distance is at most δ²(1 + rκ) + r².
inline double sphere_inflation(const LinkGeometry& geom, std::size_t k) {
  if (k < 1) throw std::invalid_argument("need at least one sphere per link");
  const double delta = k == 1 ? 0.5 * geom.length : 0.5 * geom.length / static_cast<double>(k - 1);
  const double kappa = std::numbers::pi / geom.length;
  const double reach = std::sqrt(delta * delta * (1.0 + geom.radius * kappa) + geom.radius * geom.radius);
  return std::max(kSphereMinInflation, reach / geom.radius);
}

/// k spheres per link at equally spaced backbone points (both ends included;
/// a single sphere sits at mid-length), world frame.
inline std::vector<Sphere> robot_shape_spheres(const RobotConfig& q, std::span<const LinkGeometry> geoms,
                                               std::size_t k_per_link, std::span<const Pose> fk) {
  if (k_per_link < 1) throw std::invalid_argument("need at least one sphere per link");
  if (q.size() != geoms.size() || fk.size() != geoms.size() + 1)
    throw std::invalid_argument("robot_shape_spheres: link count mismatch");
  std::vector<Sphere> out;
  out.reserve(k_per_link * q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double radius = geoms[i].radius * sphere_inflation(geoms[i], k_per_link);
    for (std::size_t j = 0; j < k_per_link; ++j) {
      const double s = k_per_link == 1 ? 0.5 * geoms[i].length
                                       : geoms[i].length * static_cast<double>(j) / static_cast<double>(k_per_link - 1);
      out.push_back({fk[i] * backbone_point(q[i], geoms[i].length, s), radius});
    }
  }
  return out;
}

inline std::vector<Sphere> robot_shape_spheres(const RobotConfig& q, std::span<const LinkGeometry> geoms,
                                               std::size_t k_per_link) {
  return robot_shape_spheres(q, geoms, k_per_link, forward_kinematics(q, geoms));
}

inline constexpr std::size_t kRobotCloudCirc = 8;

/// World-frame robot surface samples. `group` holds, per point, the index
/// link * kLinkSubArcs + sub-arc of the bounding capsule that contains it.
struct RobotCloud {
  std::vector<Vec3> points;
  std::vector<std::uint32_t> group;
  std::vector<Capsule> group_capsules;
  std::size_t generated = 0;  // before decimation or padding
};

inline std::size_t robot_cloud_axial(std::size_t P, std::size_t M) {
  const std::size_t per_link = (P + M - 1) / M;
  const std::size_t caps = 2 * (kCapRings * kRobotCloudCirc + 1);
  const std::size_t lateral = per_link > caps ? (per_link - caps + kRobotCloudCirc - 1) / kRobotCloudCirc : 0;
  return std::max<std::size_t>(2, lateral);
}

/// Exactly P points: every link sampled with surface_points, then decimated by
/// stratified selection (index floor(i·T/P)) or padded cyclically.
inline RobotCloud robot_surface_cloud(const RobotConfig& q, std::span<const LinkGeometry> geoms, std::size_t P,
                                      std::span<const Pose> fk) {
  const std::size_t m = geoms.size();
  if (q.size() != m || fk.size() != m + 1) throw std::invalid_argument("robot_surface_cloud: link count mismatch");
  if (P < m) throw std::invalid_argument("robot_surface_cloud needs P >= number of links");
  const std::size_t n_axial = robot_cloud_axial(P, m);

  RobotCloud all;
  for (std::size_t i = 0; i < m; ++i) {
    const auto local = surface_points(q[i], geoms[i], n_axial, kRobotCloudCirc);
    for (std::size_t k = 0; k < local.total(); ++k) {
      std::size_t sub = 0;
      if (k < local.lateral_count) {
        const std::size_t ring = k / kRobotCloudCirc;
        sub = std::min(kLinkSubArcs - 1, ring * kLinkSubArcs / (n_axial - 1));
      } else {
        sub = k - local.lateral_count < kCapRings * kRobotCloudCirc + 1 ? 0 : kLinkSubArcs - 1;
      }
      all.points.push_back(fk[i] * local.points[k]);
      all.group.push_back(static_cast<std::uint32_t>(i * kLinkSubArcs + sub));
    }
    for (const auto& c : link_bounding_capsules(q[i], geoms[i])) all.group_capsules.push_back({fk[i] * c.a, fk[i] * c.b, c.radius});
  }
  all.generated = all.points.size();
  if (all.generated == P) return all;

  RobotCloud out;
  out.generated = all.generated;
  out.group_capsules = all.group_capsules;
  out.points.reserve(P);
  out.group.reserve(P);
  for (std::size_t i = 0; i < P; ++i) {
    const std::size_t src = all.generated > P ? i * all.generated / P : i % all.generated;
    out.points.push_back(all.points[src]);
    out.group.push_back(all.group[src]);
  }
  return out;
}

inline RobotCloud robot_surface_cloud(const RobotConfig& q, std::span<const LinkGeometry> geoms, std::size_t P) {
  return robot_surface_cloud(q, geoms, P, forward_kinematics(q, geoms));
}

/// Minimum over cloud points of the distance to a set of spheres
/// (negative inside a sphere), with leaf pruning.
inline double spheres_cloud_distance(std::span<const Sphere> spheres, const PreparedCloud& cloud) {
  if (spheres.empty()) throw std::invalid_argument("no robot spheres");
  const std::size_t n_leaves = cloud.leaf_count();
  thread_local std::vector<double> bounds;
  bounds.resize(spheres.size() * n_leaves);
  std::size_t first = 0;
  for (std::size_t s = 0; s < spheres.size(); ++s)
    for (std::size_t l = 0; l < n_leaves; ++l) {
      const std::size_t k = s * n_leaves + l;
      bounds[k] = (spheres[s].center - cloud.leaf(l).center).norm() - spheres[s].radius - cloud.leaf(l).radius -
                  ConfiguredRobot::kBoundMargin;
      if (bounds[k] < bounds[first]) first = k;
    }
  float best = std::numeric_limits<float>::infinity();
  auto visit = [&](std::size_t k) {
    const Sphere& sp = spheres[k / n_leaves];
    const std::size_t l = k % n_leaves;
    const v16f dx = cloud.xs(l) - static_cast<float>(sp.center.x());
    const v16f dy = cloud.ys(l) - static_cast<float>(sp.center.y());
    const v16f dz = cloud.zs(l) - static_cast<float>(sp.center.z());
    const v16f d = vsqrt(dx * dx + dy * dy + dz * dz) - static_cast<float>(sp.radius);
    for (int lane = 0; lane < kLanes; ++lane) best = std::min(best, d[lane]);
  };
  visit(first);
  for (std::size_t k = 0; k < bounds.size(); ++k)
    if (k != first && !(bounds[k] > static_cast<double>(best))) visit(k);
  return static_cast<double>(best);
}

/// Minimum pairwise distance between a robot cloud and an obstacle cloud.
/// Robot points are grouped by their bounding capsules, so whole (group, leaf)
/// pairs that are farther apart than the current best are skipped.
inline double pointcloud_pair_distance(const RobotCloud& robot, const PreparedCloud& cloud) {
  const std::size_t n_groups = robot.group_capsules.size(), n_leaves = cloud.leaf_count();
  thread_local std::vector<std::vector<std::array<float, 3>>> members;
  members.resize(n_groups);
  for (auto& g : members) g.clear();
  for (std::size_t i = 0; i < robot.points.size(); ++i)
    members[robot.group[i]].push_back({static_cast<float>(robot.points[i].x()), static_cast<float>(robot.points[i].y()),
                                       static_cast<float>(robot.points[i].z())});

  const std::size_t groups = cloud.leaf_groups(), stride = groups * kLanes;
  thread_local std::vector<float> bounds;
  bounds.assign(n_groups * stride, std::numeric_limits<float>::infinity());
  for (std::size_t g = 0; g < n_groups; ++g) {
    if (members[g].empty()) continue;
    const CapsuleF cap = CapsuleF::from(robot.group_capsules[g]);
    for (std::size_t lg = 0; lg < groups; ++lg) {
      const v16f b = cap.distance(cloud.leaf_xs(lg), cloud.leaf_ys(lg), cloud.leaf_zs(lg)) - cloud.leaf_radii(lg) -
                     static_cast<float>(ConfiguredRobot::kBoundMargin);
      std::memcpy(&bounds[g * stride + lg * kLanes], &b, sizeof(b));
    }
  }
  std::size_t first = 0;
  for (std::size_t g = 0; g < n_groups; ++g)
    for (std::size_t l = 0; l < n_leaves; ++l)
      if (bounds[g * stride + l] < bounds[first]) first = g * stride + l;
  float best_sq = std::numeric_limits<float>::infinity();
  auto visit = [&](std::size_t k) {
    const std::size_t g = k / stride, l = k % stride;
    v16f m = splat(std::numeric_limits<float>::infinity());
    const v16f xs = cloud.xs(l), ys = cloud.ys(l), zs = cloud.zs(l);
    for (const auto& p : members[g]) {
      const v16f dx = xs - p[0], dy = ys - p[1], dz = zs - p[2];
      m = vmin(m, dx * dx + dy * dy + dz * dz);
    }
    for (int lane = 0; lane < kLanes; ++lane) best_sq = std::min(best_sq, m[lane]);
  };
  visit(first);
  thread_local std::vector<std::pair<float, std::uint32_t>> pending;
  pending.clear();
  const float best0 = std::sqrt(best_sq);
  for (std::size_t g = 0; g < n_groups; ++g)
    for (std::size_t l = 0; l < n_leaves; ++l) {
      const std::size_t k = g * stride + l;
      if (k != first && bounds[k] <= best0) pending.emplace_back(bounds[k], static_cast<std::uint32_t>(k));
    }
  std::sort(pending.begin(), pending.end());
  for (const auto& [b, k] : pending) {
    if (b > std::sqrt(best_sq)) break;
    visit(k);
  }
  return std::sqrt(static_cast<double>(best_sq));
}

}  // namespace ncedf
