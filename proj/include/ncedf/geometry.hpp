#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>

namespace ncedf {

using Vec3 = Eigen::Vector3d;

/// Rigid homogeneous transform. The 4x4 matrix is exposed through `.matrix()`;
/// files store it row-major.
using Pose = Eigen::Isometry3d;

/// Frobenius norm of the difference of two 4x4 homogeneous matrices.
inline double frobenius_distance(const Pose& a, const Pose& b) {
  return (a.matrix() - b.matrix()).norm();
}

/// Row-major flattening of the 4x4 matrix.
inline std::array<double, 16> to_row_major(const Pose& pose) {
  std::array<double, 16> out{};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) out[static_cast<std::size_t>(4 * r + c)] = pose.matrix()(r, c);
  return out;
}

inline Pose from_row_major(const std::array<double, 16>& m) {
  Pose pose = Pose::Identity();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) pose.matrix()(r, c) = m[static_cast<std::size_t>(4 * r + c)];
  return pose;
}

/// Axis-aligned box.
struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= min.array() - tol).all() && (p.array() <= max.array() + tol).all();
  }

  /// Euclidean distance from p to the box (0 inside).
  double distance(const Vec3& p) const {
    const Vec3 below = (min - p).cwiseMax(0.0);
    const Vec3 above = (p - max).cwiseMax(0.0);
    return (below + above).norm();
  }

  Vec3 extent() const { return max - min; }
  double diameter() const { return extent().norm(); }

  friend bool operator==(const Aabb& a, const Aabb& b) { return a.min == b.min && a.max == b.max; }
};

}  // namespace ncedf
