// Planar N-link arm: kinematics, capsule collision primitives, and the
// ground-truth feasibility check that defines benchmark success.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "flowplan/common.hpp"

namespace flowplan {

struct RobotSpec {
  int joints = 3;
  std::vector<double> link_lengths = {0.4, 0.3, 0.2};  // meters
  double link_radius = 0.03;                           // capsule radius, meters
  Vec2 base{0.0, 0.0};

  void validate() const {
    if (joints < 2) throw InputError("RobotSpec: need at least 2 joints");
    if (static_cast<int>(link_lengths.size()) != joints)
      throw InputError("RobotSpec: link count does not match joint count");
    for (double l : link_lengths)
      if (!(l > 0.0)) throw InputError("RobotSpec: link lengths must be positive");
    if (!(link_radius > 0.0)) throw InputError("RobotSpec: link radius must be positive");
  }

  double reach() const {
    double r = 0.0;
    for (double l : link_lengths) r += l;
    return r;
  }
};

// Joint angles wrapped to (-pi, pi] on construction.
struct JointConfig {
  std::vector<double> q;

  JointConfig() = default;
  explicit JointConfig(std::vector<double> angles) : q(std::move(angles)) {
    for (double& a : q) {
      if (!std::isfinite(a)) throw InputError("JointConfig: non-finite angle");
      a = wrap_angle(a);
    }
  }

  int size() const { return static_cast<int>(q.size()); }
  double operator[](int i) const { return q[static_cast<size_t>(i)]; }
};

// K x J waypoints at a fixed time step.
struct Trajectory {
  int steps = 0;   // K
  int joints = 0;  // J
  double dt = 0.1;
  std::vector<double> q;  // row-major K*J

  Trajectory() = default;
  Trajectory(int k, int j, double dt_) : steps(k), joints(j), dt(dt_), q(static_cast<size_t>(k) * j, 0.0) {
    if (k < 2) throw InputError("Trajectory: need at least 2 waypoints");
    if (!(dt_ > 0.0)) throw InputError("Trajectory: dt must be positive");
  }

  double& at(int k, int j) { return q[static_cast<size_t>(k) * joints + j]; }
  double at(int k, int j) const { return q[static_cast<size_t>(k) * joints + j]; }

  std::vector<double> row(int k) const {
    return {q.begin() + static_cast<ptrdiff_t>(k) * joints,
            q.begin() + static_cast<ptrdiff_t>(k + 1) * joints};
  }
  void set_row(int k, const std::vector<double>& r) {
    std::copy(r.begin(), r.end(), q.begin() + static_cast<ptrdiff_t>(k) * joints);
  }
};

struct Limits {
  std::vector<double> pos_lo, pos_hi;  // radians
  std::vector<double> vel_lo, vel_hi;
  std::vector<double> acc_lo, acc_hi;
  std::vector<double> jerk_lo, jerk_hi;

  static Limits defaults(int joints) {
    Limits l;
    l.pos_lo.assign(joints, -kPi);
    l.pos_hi.assign(joints, kPi);
    l.vel_lo.assign(joints, -2.0);
    l.vel_hi.assign(joints, 2.0);
    l.acc_lo.assign(joints, -10.0);
    l.acc_hi.assign(joints, 10.0);
    l.jerk_lo.assign(joints, -100.0);
    l.jerk_hi.assign(joints, 100.0);
    return l;
  }

  void validate() const {
    auto check = [](const std::vector<double>& lo, const std::vector<double>& hi, const char* what) {
      if (lo.size() != hi.size()) throw InputError(std::string("Limits: ") + what + " size mismatch");
      for (size_t i = 0; i < lo.size(); ++i)
        if (!(lo[i] < hi[i])) throw InputError(std::string("Limits: ") + what + " lower must be < upper");
    };
    check(pos_lo, pos_hi, "position");
    check(vel_lo, vel_hi, "velocity");
    check(acc_lo, acc_hi, "acceleration");
    check(jerk_lo, jerk_hi, "jerk");
  }
};

struct Disc {
  Vec2 center;
  double radius = 0.0;
};

struct Segment {
  Vec2 a, b;
};

struct FeasibilityReport {
  bool reached_goal = false;
  bool collision_free = false;
  bool within_limits = false;
  double min_clearance = 0.0;  // meters, over all checked configurations
  double goal_error = 0.0;     // radians, L2
  std::optional<int> first_violation;  // waypoint index

  bool feasible() const { return reached_goal && collision_free && within_limits; }
};

// ---- kinematics -------------------------------------------------------------

// Joint pivot positions: entry i is where joint i rotates, entry J is the tip.
inline std::vector<Vec2> joint_positions(const std::vector<double>& q, const RobotSpec& robot) {
  std::vector<Vec2> pts(static_cast<size_t>(robot.joints) + 1);
  pts[0] = robot.base;
  double heading = 0.0;
  for (int i = 0; i < robot.joints; ++i) {
    heading += q[static_cast<size_t>(i)];
    pts[static_cast<size_t>(i) + 1] =
        pts[static_cast<size_t>(i)] + Vec2{std::cos(heading), std::sin(heading)} * robot.link_lengths[static_cast<size_t>(i)];
  }
  return pts;
}

// Link segments; segment i runs from joint i to joint i+1 with direction angle
// equal to the running sum of the first i+1 joint angles.
inline std::vector<Segment> forward_kinematics(const JointConfig& q, const RobotSpec& robot) {
  if (q.size() != robot.joints) throw InputError("forward_kinematics: config size mismatch");
  const auto pts = joint_positions(q.q, robot);
  std::vector<Segment> segs(static_cast<size_t>(robot.joints));
  for (int i = 0; i < robot.joints; ++i)
    segs[static_cast<size_t>(i)] = {pts[static_cast<size_t>(i)], pts[static_cast<size_t>(i) + 1]};
  return segs;
}

// ---- distance primitives ------------------------------------------------------

// Closest-point parameter of `p` on segment ab, clamped to [0, 1].
inline double segment_param(Segment s, Vec2 p) {
  const Vec2 d = s.b - s.a;
  const double len2 = d.dot(d);
  if (len2 <= 0.0) return 0.0;  // zero-length: treat as point
  return std::clamp((p - s.a).dot(d) / len2, 0.0, 1.0);
}

inline double point_segment_distance(Vec2 p, Segment s) {
  const double t = segment_param(s, p);
  return (p - (s.a + (s.b - s.a) * t)).norm();
}

// Signed clearance between a segment and a disc boundary: distance from the
// disc center to the segment minus the disc radius. Negative means the center
// disc overlaps the segment line.
inline double segment_circle_distance(Segment s, Vec2 center, double radius) {
  return point_segment_distance(center, s) - radius;
}

// Closest points between two segments (Ericson, Real-Time Collision
// Detection 5.1.9). Returns squared distance; s and t are the parameters.
inline double closest_segment_segment(Segment p, Segment q, double& s, double& t) {
  const Vec2 d1 = p.b - p.a;
  const Vec2 d2 = q.b - q.a;
  const Vec2 r = p.a - q.a;
  const double a = d1.dot(d1), e = d2.dot(d2), f = d2.dot(r);
  constexpr double eps = 1e-15;
  if (a <= eps && e <= eps) {
    s = t = 0.0;
    return r.dot(r);
  }
  if (a <= eps) {
    s = 0.0;
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= eps) {
      t = 0.0;
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      s = denom > eps ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  const Vec2 c1 = p.a + d1 * s;
  const Vec2 c2 = q.a + d2 * t;
  return (c1 - c2).dot(c1 - c2);
}

inline double segment_segment_distance(Segment p, Segment q) {
  double s, t;
  return std::sqrt(closest_segment_segment(p, q, s, t));
}

// ---- clearance ----------------------------------------------------------------

// Minimum clearance of a configuration against disc obstacles and its own
// nonadjacent links. Link capsules count their radius on both sides:
//   link vs disc:  dist(center, segment) - disc_r - link_r
//   link vs link:  dist(segment, segment) - 2 * link_r
// <= 0 means collision. Adjacent links always touch at the shared joint.
inline double config_clearance(const std::vector<double>& q, const std::vector<Disc>& discs,
                               const RobotSpec& robot) {
  const auto segs = [&] {
    const auto pts = joint_positions(q, robot);
    std::vector<Segment> s(static_cast<size_t>(robot.joints));
    for (int i = 0; i < robot.joints; ++i)
      s[static_cast<size_t>(i)] = {pts[static_cast<size_t>(i)], pts[static_cast<size_t>(i) + 1]};
    return s;
  }();
  double best = std::numeric_limits<double>::infinity();
  for (const Segment& seg : segs)
    for (const Disc& d : discs)
      best = std::min(best, segment_circle_distance(seg, d.center, d.radius) - robot.link_radius);
  for (int i = 0; i < robot.joints; ++i)
    for (int j = i + 2; j < robot.joints; ++j)
      best = std::min(best, segment_segment_distance(segs[static_cast<size_t>(i)],
                                                     segs[static_cast<size_t>(j)]) -
                                2.0 * robot.link_radius);
  return best;
}

inline double config_clearance(const JointConfig& q, const std::vector<Disc>& discs,
                               const RobotSpec& robot) {
  return config_clearance(q.q, discs, robot);
}

// ---- feasibility ----------------------------------------------------------------

namespace detail {
// One-sided divided differences: vel needs 2 waypoints, acc 3, jerk 4.
inline bool derivative_within(const Trajectory& traj, const Limits& lim, int& bad_index) {
  const int K = traj.steps, J = traj.joints;
  const double dt = traj.dt;
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < J; ++j)
      if (traj.at(k, j) < lim.pos_lo[static_cast<size_t>(j)] ||
          traj.at(k, j) > lim.pos_hi[static_cast<size_t>(j)]) {
        bad_index = k;
        return false;
      }
  for (int k = 0; k + 1 < K; ++k)
    for (int j = 0; j < J; ++j) {
      const double v = (traj.at(k + 1, j) - traj.at(k, j)) / dt;
      if (v < lim.vel_lo[static_cast<size_t>(j)] || v > lim.vel_hi[static_cast<size_t>(j)]) {
        bad_index = k;
        return false;
      }
    }
  for (int k = 0; k + 2 < K; ++k)
    for (int j = 0; j < J; ++j) {
      const double a = (traj.at(k + 2, j) - 2.0 * traj.at(k + 1, j) + traj.at(k, j)) / (dt * dt);
      if (a < lim.acc_lo[static_cast<size_t>(j)] || a > lim.acc_hi[static_cast<size_t>(j)]) {
        bad_index = k;
        return false;
      }
    }
  for (int k = 0; k + 3 < K; ++k)
    for (int j = 0; j < J; ++j) {
      const double jk = (traj.at(k + 3, j) - 3.0 * traj.at(k + 2, j) + 3.0 * traj.at(k + 1, j) -
                         traj.at(k, j)) /
                        (dt * dt * dt);
      if (jk < lim.jerk_lo[static_cast<size_t>(j)] || jk > lim.jerk_hi[static_cast<size_t>(j)]) {
        bad_index = k;
        return false;
      }
    }
  return true;
}
}  // namespace detail

// Ground-truth feasibility: goal reached within tolerance, collision-free at
// every waypoint and at `substeps` uniform interpolations between consecutive
// waypoints, and within position/velocity/acceleration/jerk limits.
inline FeasibilityReport check_feasibility(const Trajectory& traj, const std::vector<Disc>& discs,
                                           const Limits& limits, const JointConfig& goal,
                                           double goal_tol, const RobotSpec& robot,
                                           int substeps = 4) {
  FeasibilityReport rep;
  const int K = traj.steps, J = traj.joints;

  double goal_err2 = 0.0;
  for (int j = 0; j < J; ++j) {
    const double d = traj.at(K - 1, j) - goal[j];
    goal_err2 += d * d;
  }
  rep.goal_error = std::sqrt(goal_err2);
  rep.reached_goal = rep.goal_error <= goal_tol;

  rep.min_clearance = std::numeric_limits<double>::infinity();
  rep.collision_free = true;
  std::vector<double> cfg(static_cast<size_t>(J));
  for (int k = 0; k < K && rep.collision_free; ++k) {
    const double c = config_clearance(traj.row(k), discs, robot);
    rep.min_clearance = std::min(rep.min_clearance, c);
    if (c <= 0.0) {
      rep.collision_free = false;
      rep.first_violation = k;
      break;
    }
    if (k + 1 == K) break;
    for (int s = 1; s <= substeps; ++s) {
      const double f = static_cast<double>(s) / (substeps + 1);
      for (int j = 0; j < J; ++j)
        cfg[static_cast<size_t>(j)] = traj.at(k, j) + f * (traj.at(k + 1, j) - traj.at(k, j));
      const double ci = config_clearance(cfg, discs, robot);
      rep.min_clearance = std::min(rep.min_clearance, ci);
      if (ci <= 0.0) {
        rep.collision_free = false;
        rep.first_violation = k;
        break;
      }
    }
  }

  int bad_index = -1;
  rep.within_limits = detail::derivative_within(traj, limits, bad_index);
  if (!rep.within_limits && (!rep.first_violation || bad_index < *rep.first_violation))
    rep.first_violation = bad_index;
  if (!rep.reached_goal && !rep.first_violation) rep.first_violation = K - 1;
  return rep;
}

}  // namespace flowplan
