// Scene generation, simulated single-view 2-D perception, and obstacle
// estimation from the observed point cloud only.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include "flowplan/arm.hpp"
#include "flowplan/common.hpp"
#include "flowplan/rng.hpp"

namespace flowplan {

struct Box2 {
  Vec2 lo{-1.6, -1.6};
  Vec2 hi{1.6, 1.6};

  bool contains(Vec2 p, double slack = 0.0) const {
    return p.x >= lo.x - slack && p.x <= hi.x + slack && p.y >= lo.y - slack && p.y <= hi.y + slack;
  }
  Vec2 clamp(Vec2 p) const {
    return {std::clamp(p.x, lo.x, hi.x), std::clamp(p.y, lo.y, hi.y)};
  }
};

struct Scene {
  std::vector<Disc> obstacles;  // ground truth
  Box2 workspace;
};

struct CameraPose {
  Vec2 position;
  double heading = 0.0;      // radians
  double fov = kPi / 2;      // radians, (0, pi]
  int ray_count = 256;

  void validate() const {
    if (!(fov > 0.0) || fov > kPi) throw InputError("CameraPose: fov must be in (0, pi]");
    if (ray_count < 16) throw InputError("CameraPose: need at least 16 rays");
  }
};

// Labels: 0 = obstacle surface, 1 = robot surface.
inline constexpr int kLabelObstacle = 0;
inline constexpr int kLabelRobot = 1;

struct PointCloud {
  std::vector<Vec2> points;
  std::vector<int> labels;
  bool sentinel = false;  // true when the view had zero hits

  int size() const { return static_cast<int>(points.size()); }
};

// Collision geometry inferred from the observation alone; never populated
// from a ground-truth Scene.
struct EstimatedWorld {
  std::vector<Disc> discs;
};

// ---- scene sampling -----------------------------------------------------------

struct SceneParams {
  int min_obstacles = 0;
  int max_obstacles = 0;
  double min_radius = 0.05;
  double max_radius = 0.15;
  double annulus_inner = 0.2;  // meters from base, reachable band
  double annulus_outer = 0.9;
};

inline Scene sample_scene(Rng& rng, const SceneParams& p, Vec2 base = {0.0, 0.0}) {
  if (p.max_obstacles < p.min_obstacles || p.min_radius > p.max_radius ||
      !(p.annulus_inner < p.annulus_outer))
    throw InputError("sample_scene: invalid parameter ranges");
  Scene scene;
  const int count = rng.uniform_int(p.min_obstacles, p.max_obstacles);
  const double r0sq = p.annulus_inner * p.annulus_inner;
  const double r1sq = p.annulus_outer * p.annulus_outer;
  for (int i = 0; i < count; ++i) {
    const double rad = std::sqrt(rng.uniform() * (r1sq - r0sq) + r0sq);  // area-uniform
    const double ang = rng.uniform(0.0, 2.0 * kPi);
    const double r = rng.uniform(p.min_radius, p.max_radius);
    scene.obstacles.push_back({base + Vec2{rad * std::cos(ang), rad * std::sin(ang)}, r});
  }
  return scene;
}

// Camera on a 1.5 m circle around the base, heading toward the base with
// +-0.3 rad jitter.
inline CameraPose sample_camera(Rng& rng, Vec2 base = {0.0, 0.0}) {
  CameraPose cam;
  const double ang = rng.uniform(0.0, 2.0 * kPi);
  cam.position = base + Vec2{1.5 * std::cos(ang), 1.5 * std::sin(ang)};
  const Vec2 to_base = base - cam.position;
  cam.heading = std::atan2(to_base.y, to_base.x) + rng.uniform(-0.3, 0.3);
  cam.fov = kPi / 2;
  cam.ray_count = 256;
  return cam;
}

// ---- ray casting ----------------------------------------------------------------

namespace detail {
constexpr double kRayEps = 1e-9;

// Nearest positive ray parameter hitting the circle boundary, or +inf.
inline double ray_circle(Vec2 o, Vec2 d, Vec2 c, double r) {
  const Vec2 oc = o - c;
  const double b = oc.dot(d);
  const double q = oc.dot(oc) - r * r;
  const double disc = b * b - q;
  if (disc < 0.0) return std::numeric_limits<double>::infinity();
  const double sq = std::sqrt(disc);
  const double t0 = -b - sq, t1 = -b + sq;
  if (t0 > kRayEps) return t0;
  if (t1 > kRayEps) return t1;
  return std::numeric_limits<double>::infinity();
}

// Nearest positive ray parameter on a capsule boundary (segment + radius).
inline double ray_capsule(Vec2 o, Vec2 d, Segment s, double r) {
  double best = std::numeric_limits<double>::infinity();
  const Vec2 ab = s.b - s.a;
  const double len = ab.norm();
  // End caps: accept circle hits whose closest segment point is that endpoint.
  for (int side = 0; side < 2; ++side) {
    const Vec2 c = side == 0 ? s.a : s.b;
    const Vec2 oc = o - c;
    const double b = oc.dot(d);
    const double q = oc.dot(oc) - r * r;
    const double disc = b * b - q;
    if (disc < 0.0) continue;
    const double sq = std::sqrt(disc);
    for (double t : {-b - sq, -b + sq}) {
      if (t <= kRayEps || t >= best) continue;
      const Vec2 p = o + d * t;
      if (len <= kRayEps) {
        best = t;
        continue;
      }
      const double proj = (p - s.a).dot(ab) / (len * len);
      if ((side == 0 && proj <= 0.0) || (side == 1 && proj >= 1.0)) best = t;
    }
  }
  if (len > kRayEps) {
    const Vec2 n = Vec2{-ab.y, ab.x} * (1.0 / len);
    for (int side = 0; side < 2; ++side) {
      const Vec2 off = n * (side == 0 ? r : -r);
      const Vec2 p0 = s.a + off;
      // Solve p0 + u*ab = o + t*d.
      const double det = ab.x * (-d.y) - (-d.x) * ab.y;
      if (std::abs(det) < 1e-14) continue;
      const Vec2 rhs = o - p0;
      const double u = (rhs.x * (-d.y) + d.x * rhs.y) / det;
      const double t = (ab.x * rhs.y - ab.y * rhs.x) / det;
      if (u >= 0.0 && u <= 1.0 && t > kRayEps && t < best) best = t;
    }
  }
  return best;
}
}  // namespace detail

// Casts `ray_count` rays across the fov; each returns its first hit on any
// obstacle-disc or robot-capsule boundary, labeled by what it hit. The hit set
// is resampled with replacement to exactly `n_points`. Views with zero hits
// return n copies of a far sentinel on the workspace boundary, flagged.
inline PointCloud render_single_view(const Scene& scene, const std::vector<double>& robot_config,
                                     const RobotSpec& robot, const CameraPose& cam, Rng& rng,
                                     int n_points = 128) {
  cam.validate();
  for (const Disc& d : scene.obstacles)
    if ((cam.position - d.center).norm() <= d.radius)
      throw InputError("render_single_view: camera inside an obstacle");

  const auto segs = forward_kinematics(JointConfig(robot_config), robot);
  std::vector<Vec2> hit_points;
  std::vector<int> hit_labels;
  for (int i = 0; i < cam.ray_count; ++i) {
    const double ang = cam.heading - cam.fov / 2 + cam.fov * (i + 0.5) / cam.ray_count;
    const Vec2 dir{std::cos(ang), std::sin(ang)};
    double best = std::numeric_limits<double>::infinity();
    int label = -1;
    for (const Disc& d : scene.obstacles) {
      const double t = detail::ray_circle(cam.position, dir, d.center, d.radius);
      if (t < best) {
        best = t;
        label = kLabelObstacle;
      }
    }
    for (const Segment& s : segs) {
      const double t = detail::ray_capsule(cam.position, dir, s, robot.link_radius);
      if (t < best) {
        best = t;
        label = kLabelRobot;
      }
    }
    if (label >= 0) {
      hit_points.push_back(cam.position + dir * best);
      hit_labels.push_back(label);
    }
  }

  PointCloud pc;
  if (hit_points.empty()) {
    const Vec2 far = scene.workspace.clamp(
        cam.position + Vec2{std::cos(cam.heading), std::sin(cam.heading)} * 10.0);
    pc.sentinel = true;
    pc.points.assign(static_cast<size_t>(n_points), far);
    pc.labels.assign(static_cast<size_t>(n_points), kLabelObstacle);
    return pc;
  }
  pc.points.reserve(static_cast<size_t>(n_points));
  pc.labels.reserve(static_cast<size_t>(n_points));
  for (int i = 0; i < n_points; ++i) {
    const int idx = rng.uniform_int(0, static_cast<int>(hit_points.size()) - 1);
    pc.points.push_back(hit_points[static_cast<size_t>(idx)]);
    pc.labels.push_back(hit_labels[static_cast<size_t>(idx)]);
  }
  return pc;
}

// ---- minimal enclosing disc -------------------------------------------------------

namespace detail {
inline Disc disc_from_2(Vec2 a, Vec2 b) {
  const Vec2 c = (a + b) * 0.5;
  return {c, (a - c).norm()};
}

inline Disc disc_from_3(Vec2 a, Vec2 b, Vec2 c) {
  const double ax = a.x, ay = a.y, bx = b.x, by = b.y, cx = c.x, cy = c.y;
  const double d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by));
  if (std::abs(d) < 1e-12) {
    // Collinear: widest pair wins.
    Disc best = disc_from_2(a, b);
    for (const Disc cand : {disc_from_2(a, c), disc_from_2(b, c)})
      if (cand.radius > best.radius) best = cand;
    return best;
  }
  const double a2 = ax * ax + ay * ay, b2 = bx * bx + by * by, c2 = cx * cx + cy * cy;
  const Vec2 center{(a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d,
                    (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d};
  return {center, (a - center).norm()};
}

inline bool in_disc(const Disc& d, Vec2 p, double slack = 1e-9) {
  return (p - d.center).norm() <= d.radius + slack;
}

inline Disc welzl(std::vector<Vec2>& pts, std::vector<Vec2>& support, size_t n) {
  if (n == 0 || support.size() == 3) {
    switch (support.size()) {
      case 0: return {{0, 0}, 0.0};
      case 1: return {support[0], 0.0};
      case 2: return disc_from_2(support[0], support[1]);
      default: return disc_from_3(support[0], support[1], support[2]);
    }
  }
  const Vec2 p = pts[n - 1];
  Disc d = welzl(pts, support, n - 1);
  if (in_disc(d, p)) return d;
  support.push_back(p);
  d = welzl(pts, support, n - 1);
  support.pop_back();
  return d;
}
}  // namespace detail

// Deterministic (unshuffled) Welzl; fine at cluster sizes up to a few hundred.
inline Disc minimal_enclosing_disc(std::vector<Vec2> pts) {
  std::vector<Vec2> support;
  return detail::welzl(pts, support, pts.size());
}

// ---- obstacle estimation -------------------------------------------------------------

// Obstacle-labeled points are clustered by single-linkage at `cluster_dist`;
// each cluster becomes its minimal enclosing disc inflated by `inflation`.
// Robot-labeled points and sentinel clouds contribute nothing.
inline EstimatedWorld estimate_obstacles(const PointCloud& pc, double inflation = 0.03,
                                         double cluster_dist = 0.08) {
  EstimatedWorld world;
  if (pc.sentinel) return world;
  std::vector<Vec2> obs;
  for (int i = 0; i < pc.size(); ++i)
    if (pc.labels[static_cast<size_t>(i)] == kLabelObstacle)
      obs.push_back(pc.points[static_cast<size_t>(i)]);
  if (obs.empty()) return world;

  // Union-find over all pairs within the threshold (order-independent).
  std::vector<int> parent(obs.size());
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int i) {
    while (parent[static_cast<size_t>(i)] != i) {
      parent[static_cast<size_t>(i)] = parent[static_cast<size_t>(parent[static_cast<size_t>(i)])];
      i = parent[static_cast<size_t>(i)];
    }
    return i;
  };
  for (size_t i = 0; i < obs.size(); ++i)
    for (size_t j = i + 1; j < obs.size(); ++j)
      if ((obs[i] - obs[j]).norm() <= cluster_dist) {
        const int a = find(static_cast<int>(i)), b = find(static_cast<int>(j));
        if (a != b) parent[static_cast<size_t>(std::max(a, b))] = std::min(a, b);
      }

  // Clusters emitted in order of their smallest member index.
  std::vector<int> roots;
  for (size_t i = 0; i < obs.size(); ++i)
    if (find(static_cast<int>(i)) == static_cast<int>(i)) roots.push_back(static_cast<int>(i));
  for (int root : roots) {
    std::vector<Vec2> members;
    for (size_t i = 0; i < obs.size(); ++i)
      if (find(static_cast<int>(i)) == root) members.push_back(obs[i]);
    Disc d = minimal_enclosing_disc(std::move(members));
    d.radius += inflation;
    world.discs.push_back(d);
  }
  return world;
}

}  // namespace flowplan
