#pragma once

// Piecewise-constant-curvature kinematics for multi-link continuum robots.
//
// Each link has an inextensible backbone of length L and three chambers at
// 2π/3 spacing. The chamber arc lengths determine the bending angle theta and
// the bending-plane angle phi; links chain through their tip frames.

#include "ncedf/geometry.hpp"

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ncedf {

struct LinkGeometry {
  double length = 2.0;  // backbone L (m)
  double radius = 0.2;  // r (m)
  double l_min = 1.6;
  double l_max = 2.4;

  bool valid() const { return radius > 0.0 && 0.0 < l_min && l_min < length && length < l_max; }

  friend bool operator==(const LinkGeometry&, const LinkGeometry&) = default;
};

struct LinkConfig {
  double theta = 0.0;  // bending angle, [0, π]
  double phi = 0.0;    // bending-plane angle, [-π, π)

  friend bool operator==(const LinkConfig&, const LinkConfig&) = default;
};

struct RobotConfig {
  std::vector<LinkConfig> links;

  std::size_t size() const { return links.size(); }
  const LinkConfig& operator[](std::size_t i) const { return links[i]; }
  LinkConfig& operator[](std::size_t i) { return links[i]; }
};

/// Chamber arc lengths for all links: link 1 chambers 1..3, link 2 chambers 1..3, ...
struct ArcLengths {
  std::vector<double> values;

  std::size_t link_count() const { return values.size() / 3; }
  std::span<const double, 3> link(std::size_t i) const {
    return std::span<const double, 3>(values.data() + 3 * i, 3);
  }
  std::span<double, 3> link(std::size_t i) { return std::span<double, 3>(values.data() + 3 * i, 3); }

  static ArcLengths straight(std::span<const LinkGeometry> geoms) {
    ArcLengths x;
    for (const auto& g : geoms) x.values.insert(x.values.end(), {g.length, g.length, g.length});
    return x;
  }

  friend bool operator==(const ArcLengths&, const ArcLengths&) = default;
};

inline constexpr double kStraightThreshold = 1e-6;
inline constexpr double kRadicandFloor = 1e-15;

namespace detail {
// Number of forward_kinematics() evaluations since program start. Tests use it
// to check that batched distance queries reuse a single chain evaluation.
inline std::atomic<std::uint64_t> fk_evaluations{0};
}  // namespace detail

inline std::uint64_t forward_kinematics_count() {
  return detail::fk_evaluations.load(std::memory_order_relaxed);
}

inline LinkConfig arc_lengths_to_config(std::span<const double, 3> l, const LinkGeometry& geom) {
  const double l1 = l[0], l2 = l[1], l3 = l[2];
  const double radicand = l1 * l1 + l2 * l2 + l3 * l3 - l1 * l2 - l1 * l3 - l2 * l3;
  if (radicand <= kRadicandFloor) return {0.0, 0.0};
  double theta = 2.0 * std::sqrt(radicand) / (3.0 * geom.radius);
  theta = std::clamp(theta, 0.0, std::numbers::pi);
  double phi = std::atan2(std::numbers::sqrt3 * (l2 - l3), l2 + l3 - 2.0 * l1);
  if (phi >= std::numbers::pi) phi = -std::numbers::pi;
  return {theta, phi};
}

inline LinkConfig arc_lengths_to_config(const std::array<double, 3>& l, const LinkGeometry& geom) {
  return arc_lengths_to_config(std::span<const double, 3>(l), geom);
}

/// Inverse of arc_lengths_to_config: chamber j sits where cos(phi + (j-1)·2π/3)
/// makes the forward map recover (theta, phi) exactly.
inline std::array<double, 3> config_to_arc_lengths(const LinkConfig& cfg, const LinkGeometry& geom) {
  constexpr double kSpacing = 2.0 * std::numbers::pi / 3.0;
  const double scale = geom.radius * cfg.theta;
  return {geom.length - scale * std::cos(cfg.phi),
          geom.length - scale * std::cos(cfg.phi + kSpacing),
          geom.length - scale * std::cos(cfg.phi + 2.0 * kSpacing)};
}

inline RobotConfig arc_lengths_to_robot_config(const ArcLengths& x, std::span<const LinkGeometry> geoms) {
  if (x.values.size() != 3 * geoms.size())
    throw std::invalid_argument("arc length vector does not match link count");
  RobotConfig q;
  q.links.resize(geoms.size());
  for (std::size_t i = 0; i < geoms.size(); ++i) q.links[i] = arc_lengths_to_config(x.link(i), geoms[i]);
  return q;
}

inline ArcLengths robot_config_to_arc_lengths(const RobotConfig& q, std::span<const LinkGeometry> geoms) {
  if (q.size() != geoms.size()) throw std::invalid_argument("configuration does not match link count");
  ArcLengths x;
  x.values.reserve(3 * q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto l = config_to_arc_lengths(q[i], geoms[i]);
    x.values.insert(x.values.end(), l.begin(), l.end());
  }
  return x;
}

/// Frame of the backbone cross-section at arc parameter s ∈ [0, L], in the link
/// base frame. The z-axis of the rotation is the backbone tangent.
inline Pose arc_frame(const LinkConfig& cfg, double length, double s) {
  Pose pose = Pose::Identity();
  if (cfg.theta < kStraightThreshold) {
    pose.translation() = Vec3(0.0, 0.0, s);
    return pose;
  }
  const double alpha = s * cfg.theta / length;
  const double ca = std::cos(alpha), sa = std::sin(alpha);
  const double cp = std::cos(cfg.phi), sp = std::sin(cfg.phi);
  const double rho = length / cfg.theta;
  const double half = std::sin(0.5 * alpha);
  const double radial = rho * 2.0 * half * half;  // rho (1 - cos alpha)
  const double axial = rho * sa;

  auto& m = pose.matrix();
  m(0, 0) = cp * cp * ca + sp * sp;
  m(0, 1) = cp * sp * (ca - 1.0);
  m(0, 2) = cp * sa;
  m(1, 0) = cp * sp * (ca - 1.0);
  m(1, 1) = sp * sp * ca + cp * cp;
  m(1, 2) = sp * sa;
  m(2, 0) = -cp * sa;
  m(2, 1) = -sp * sa;
  m(2, 2) = ca;
  m(0, 3) = cp * radial;
  m(1, 3) = sp * radial;
  m(2, 3) = axial;
  return pose;
}

/// Tip pose of a link relative to its base: Rot_z(phi)·Rot_y(theta)·Rot_z(-phi)
/// with translation Rot_z(phi)·(rho(1 - cos theta), 0, rho sin theta).
inline Pose link_transform(const LinkConfig& cfg, double length) { return arc_frame(cfg, length, length); }

/// Writes the M+1 cumulative poses (global base, each link tip) into `out`.
inline void forward_kinematics(const RobotConfig& q, std::span<const LinkGeometry> geoms, std::vector<Pose>& out) {
  if (q.size() != geoms.size()) throw std::invalid_argument("forward_kinematics: link count mismatch");
  detail::fk_evaluations.fetch_add(1, std::memory_order_relaxed);
  out.resize(q.size() + 1);
  out[0] = Pose::Identity();
  for (std::size_t i = 0; i < q.size(); ++i) out[i + 1] = out[i] * link_transform(q[i], geoms[i].length);
}

inline std::vector<Pose> forward_kinematics(const RobotConfig& q, std::span<const LinkGeometry> geoms) {
  std::vector<Pose> out;
  forward_kinematics(q, geoms, out);
  return out;
}

inline Vec3 backbone_point(const LinkConfig& cfg, double length, double s) {
  if (cfg.theta < kStraightThreshold) return {0.0, 0.0, s};
  const double alpha = s * cfg.theta / length;
  const double rho = length / cfg.theta;
  const double half = std::sin(0.5 * alpha);
  const double radial = rho * 2.0 * half * half;
  return {std::cos(cfg.phi) * radial, std::sin(cfg.phi) * radial, rho * std::sin(alpha)};
}

inline std::vector<Vec3> backbone_points(const LinkConfig& cfg, double length, std::size_t n) {
  if (n < 2) throw std::invalid_argument("backbone_points needs n >= 2");
  std::vector<Vec3> pts;
  pts.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = length * static_cast<double>(k) / static_cast<double>(n - 1);
    pts.push_back(backbone_point(cfg, length, s));
  }
  return pts;
}

inline constexpr std::size_t kCapRings = 4;

/// Surface samples of one link in its base frame: the lateral tube first
/// (axial-major), then the base cap and the tip cap.
struct SurfaceSamples {
  std::vector<Vec3> points;
  std::size_t lateral_count = 0;

  std::size_t total() const { return points.size(); }
};

inline std::size_t surface_sample_count(std::size_t n_axial, std::size_t n_circ) {
  return n_axial * n_circ + 2 * (kCapRings * n_circ + 1);
}

inline SurfaceSamples surface_points(const LinkConfig& cfg, const LinkGeometry& geom, std::size_t n_axial,
                                     std::size_t n_circ) {
  if (n_axial < 2 || n_circ < 3) throw std::invalid_argument("surface_points needs n_axial >= 2, n_circ >= 3");
  SurfaceSamples out;
  out.points.reserve(surface_sample_count(n_axial, n_circ));

  std::vector<double> cos_a(n_circ), sin_a(n_circ);
  for (std::size_t m = 0; m < n_circ; ++m) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(n_circ);
    cos_a[m] = std::cos(a);
    sin_a[m] = std::sin(a);
  }
  auto ring = [&](const Pose& frame, double radius) {
    const Vec3 ex = frame.linear().col(0) * radius;
    const Vec3 ey = frame.linear().col(1) * radius;
    for (std::size_t m = 0; m < n_circ; ++m) out.points.push_back(frame.translation() + cos_a[m] * ex + sin_a[m] * ey);
  };

  for (std::size_t k = 0; k < n_axial; ++k) {
    const double s = geom.length * static_cast<double>(k) / static_cast<double>(n_axial - 1);
    ring(arc_frame(cfg, geom.length, s), geom.radius);
  }
  out.lateral_count = out.points.size();

  // Cap rings sit strictly inside the rim; the rim itself is the first/last lateral ring.
  for (const double s : {0.0, geom.length}) {
    const Pose frame = arc_frame(cfg, geom.length, s);
    out.points.push_back(frame.translation());
    for (std::size_t k = 1; k <= kCapRings; ++k)
      ring(frame, geom.radius * static_cast<double>(k) / static_cast<double>(kCapRings + 1));
  }
  return out;
}

/// Removes the per-link mean from each chamber triple.
inline void project_control_inplace(std::span<double> u) {
  if (u.size() % 3 != 0) throw std::invalid_argument("control dimension must be a multiple of 3");
  for (std::size_t i = 0; i < u.size(); i += 3) {
    // Mean relative to the first entry, so constant triples map to exact zeros.
    const double mean = u[i] + ((u[i + 1] - u[i]) + (u[i + 2] - u[i])) / 3.0;
    u[i] -= mean;
    u[i + 1] -= mean;
    u[i + 2] -= mean;
  }
}

inline std::vector<double> project_control(std::span<const double> u_raw) {
  std::vector<double> u(u_raw.begin(), u_raw.end());
  project_control_inplace(u);
  return u;
}

inline constexpr double kProjectionTolerance = 1e-9;

inline void step_dynamics_inplace(ArcLengths& x, std::span<const double> u, double tau) {
  if (u.size() != x.values.size()) throw std::invalid_argument("step_dynamics: control dimension mismatch");
  for (std::size_t i = 0; i < u.size(); i += 3) {
    const double mean = (u[i] + u[i + 1] + u[i + 2]) / 3.0;
    if (std::abs(mean) > kProjectionTolerance)
      throw std::logic_error("step_dynamics: control for link " + std::to_string(i / 3) +
                             " is not zero-mean; pass it through project_control first");
  }
  for (std::size_t i = 0; i < u.size(); ++i) x.values[i] += u[i] * tau;
}

inline ArcLengths step_dynamics(const ArcLengths& x, std::span<const double> u, double tau) {
  ArcLengths next = x;
  step_dynamics_inplace(next, u, tau);
  return next;
}

}  // namespace ncedf
