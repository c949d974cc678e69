#pragma once

// Per-link training data: (configuration, workspace point, distance) triplets
// with distances from brute-force surface sampling, plus a high-accuracy
// distance oracle and the validation error metrics.

#include "ncedf/geometry.hpp"
#include "ncedf/kinematics.hpp"
#include "ncedf/parallel.hpp"
#include "ncedf/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace ncedf {

struct TrainingSample {
  LinkConfig q;
  Vec3 p = Vec3::Zero();  // link frame
  double d = 0.0;
};

/// Box around a single link with base at the origin pointing +z.
inline Aabb default_link_box() { return {Vec3(-2.4, -2.4, -0.4), Vec3(2.4, 2.4, 2.8)}; }

struct DatasetSpec {
  std::size_t n_configs = 250;
  std::size_t n_workspace = 32 * 32 * 32;
  std::size_t n_axial = 40;
  std::size_t n_circ = 40;
  Aabb box = default_link_box();
  std::uint64_t seed = 0;

  std::size_t n_surface() const { return n_axial * n_circ; }

  void validate() const {
    if (n_configs < 1 || n_workspace < 1) throw std::invalid_argument("dataset counts must be >= 1");
    if (n_axial < 2 || n_circ < 3) throw std::invalid_argument("surface sampling needs n_axial >= 2, n_circ >= 3");
    if (!((box.max.array() > box.min.array()).all())) throw std::invalid_argument("bounding box is empty");
  }
};

/// Uniform chamber lengths on [l_min, l_max], shifted to mean L; samples that
/// need clamping after the shift are rejected.
template <class Urbg>
std::vector<LinkConfig> sample_configurations(const LinkGeometry& geom, std::size_t n, Urbg& rng) {
  if (n < 1) throw std::invalid_argument("sample_configurations needs n >= 1");
  std::vector<LinkConfig> out;
  out.reserve(n);
  while (out.size() < n) {
    std::array<double, 3> l{};
    for (auto& v : l) v = geom.l_min + (geom.l_max - geom.l_min) * uniform01(rng);
    const double shift = geom.length - (l[0] + l[1] + l[2]) / 3.0;
    for (auto& v : l) v = std::clamp(v + shift, geom.l_min, geom.l_max);
    if (std::abs((l[0] + l[1] + l[2]) / 3.0 - geom.length) > 1e-9) continue;
    out.push_back(arc_lengths_to_config(l, geom));
  }
  return out;
}

inline bool is_perfect_cube(std::size_t n, std::size_t* side = nullptr) {
  auto k = static_cast<std::size_t>(std::llround(std::cbrt(static_cast<double>(n))));
  for (std::size_t c = (k > 0 ? k - 1 : 0); c <= k + 1; ++c) {
    if (c * c * c == n) {
      if (side) *side = c;
      return true;
    }
  }
  return false;
}

/// Cell centres of a regular grid when n_workspace is a perfect cube (x-major),
/// uniform random points otherwise.
inline std::vector<Vec3> sample_workspace_points(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Vec3> pts;
  pts.reserve(spec.n_workspace);
  const Vec3 extent = spec.box.extent();
  std::size_t side = 0;
  if (is_perfect_cube(spec.n_workspace, &side)) {
    const Vec3 step = extent / static_cast<double>(side);
    for (std::size_t ix = 0; ix < side; ++ix)
      for (std::size_t iy = 0; iy < side; ++iy)
        for (std::size_t iz = 0; iz < side; ++iz)
          pts.push_back(spec.box.min + Vec3((static_cast<double>(ix) + 0.5) * step.x(),
                                            (static_cast<double>(iy) + 0.5) * step.y(),
                                            (static_cast<double>(iz) + 0.5) * step.z()));
    return pts;
  }
  Rng rng(mix_seed(spec.seed, 0x776f726b));
  for (std::size_t i = 0; i < spec.n_workspace; ++i) {
    const Vec3 u(rng.uniform(), rng.uniform(), rng.uniform());
    pts.push_back(spec.box.min + u.cwiseProduct(extent));
  }
  return pts;
}

namespace detail {

/// Structure-of-arrays copy of a point set for vectorized nearest-distance scans.
struct PointColumns {
  std::vector<double> x, y, z;

  explicit PointColumns(std::span<const Vec3> pts) : x(pts.size()), y(pts.size()), z(pts.size()) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      x[i] = pts[i].x();
      y[i] = pts[i].y();
      z[i] = pts[i].z();
    }
  }

  double min_distance(const Vec3& p) const {
    const double px = p.x(), py = p.y(), pz = p.z();
    double best = std::numeric_limits<double>::infinity();
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = x[i] - px, dy = y[i] - py, dz = z[i] - pz;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    return std::sqrt(best);
  }
};

inline double cross_section_offsets(const Vec3& p, const Pose& frame, double& radial) {
  const Vec3 v = p - frame.translation();
  const Vec3 t = frame.linear().col(2);
  const double axial = v.dot(t);
  radial = (v - axial * t).norm();
  return axial;
}

/// Distance from p to the rim circle of the cross-section at `frame`.
inline double rim_distance(const Vec3& p, const Pose& frame, double r) {
  double radial = 0.0;
  const double axial = cross_section_offsets(p, frame, radial);
  return std::hypot(axial, radial - r);
}

/// Distance from p to the filled cross-section disk at `frame`.
inline double disk_distance(const Vec3& p, const Pose& frame, double r) {
  double radial = 0.0;
  const double axial = cross_section_offsets(p, frame, radial);
  return std::hypot(axial, std::max(radial - r, 0.0));
}

}  // namespace detail

inline double brute_force_distance(const Vec3& p, const LinkConfig& cfg, const LinkGeometry& geom,
                                   std::size_t n_axial = 40, std::size_t n_circ = 40) {
  const auto surface = surface_points(cfg, geom, n_axial, n_circ);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : surface.points) best = std::min(best, (p - s).squaredNorm());
  return std::sqrt(best);
}

/// Upper bound on the gap between brute_force_distance and the true surface
/// distance: twice the largest spacing between neighbouring surface samples.
inline double surface_sampling_bound(const LinkConfig& cfg, const LinkGeometry& geom, std::size_t n_axial,
                                     std::size_t n_circ) {
  const double axial = (geom.length + geom.radius * cfg.theta) / static_cast<double>(n_axial - 1);
  const double circ = 2.0 * std::numbers::pi * geom.radius / static_cast<double>(n_circ);
  const double cap = geom.radius / static_cast<double>(kCapRings + 1);
  return 2.0 * std::max({axial, circ, cap});
}

inline constexpr std::size_t kOracleBackboneSamples = 2000;

/// Distance from p to the boundary of the capped constant-curvature tube. The
/// lateral surface is the union of cross-section rims; a dense backbone scan
/// brackets the nearest rim and a golden-section search refines it. The two
/// end-cap disks are handled in closed form.
inline double analytic_link_distance(const Vec3& p, const LinkConfig& cfg, const LinkGeometry& geom) {
  const double L = geom.length, r = geom.radius;
  const std::size_t n = kOracleBackboneSamples;
  const double ds = L / static_cast<double>(n - 1);
  auto lateral = [&](double s) { return detail::rim_distance(p, arc_frame(cfg, L, s), r); };

  std::size_t best_k = 0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    const double d = lateral(static_cast<double>(k) * ds);
    if (d < best) {
      best = d;
      best_k = k;
    }
  }

  double lo = std::max(0.0, (static_cast<double>(best_k) - 1.0) * ds);
  double hi = std::min(L, (static_cast<double>(best_k) + 1.0) * ds);
  constexpr double kInvPhi = 0.6180339887498949;
  double a = hi - kInvPhi * (hi - lo), b = lo + kInvPhi * (hi - lo);
  double fa = lateral(a), fb = lateral(b);
  while (hi - lo > 1e-13) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - kInvPhi * (hi - lo);
      fa = lateral(a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + kInvPhi * (hi - lo);
      fb = lateral(b);
    }
  }
  best = std::min({best, fa, fb, lateral(0.5 * (lo + hi))});

  const double base_cap = detail::disk_distance(p, Pose::Identity(), r);
  const double tip_cap = detail::disk_distance(p, link_transform(cfg, L), r);
  return std::min({best, base_cap, tip_cap});
}

/// Cartesian product of sampled configurations and workspace points,
/// configuration-major. Deterministic for a given seed and any thread count.
inline std::vector<TrainingSample> generate_dataset(const LinkGeometry& geom, const DatasetSpec& spec,
                                                    std::size_t threads = 1) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const auto configs = sample_configurations(geom, spec.n_configs, rng);
  const auto points = sample_workspace_points(spec);

  std::vector<TrainingSample> out(configs.size() * points.size());
  parallel_for(configs.size(), threads, [&](std::size_t j) {
    const auto surface = surface_points(configs[j], geom, spec.n_axial, spec.n_circ);
    for (const auto& s : surface.points)
      if (!spec.box.contains(s, 1e-12))
        throw std::invalid_argument("dataset bounding box does not contain the link surface");
    const detail::PointColumns columns(surface.points);
    for (std::size_t m = 0; m < points.size(); ++m)
      out[j * points.size() + m] = {configs[j], points[m], columns.min_distance(points[m])};
  });
  return out;
}

struct ErrorMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  double moe = 0.0;
};

inline ErrorMetrics compute_error_metrics(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size()) throw std::invalid_argument("compute_error_metrics: length mismatch");
  if (predictions.empty()) throw std::invalid_argument("compute_error_metrics: empty input");
  double abs_sum = 0.0, sq_sum = 0.0, over_sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double e = predictions[i] - targets[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    over_sum += std::max(0.0, e);
  }
  const auto n = static_cast<double>(predictions.size());
  return {abs_sum / n, std::sqrt(sq_sum / n), over_sum / n};
}

}  // namespace ncedf
