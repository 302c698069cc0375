#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>

#include "flowplan/arm.hpp"
#include "flowplan/rng.hpp"

using namespace flowplan;

namespace {

const RobotSpec kRobot;  // J=3, lengths {0.4, 0.3, 0.2}, radius 0.03

std::vector<double> random_config(Rng& rng, int joints = 3) {
  std::vector<double> q(joints);
  for (auto& a : q) a = rng.uniform(-kPi, kPi);
  return q;
}

// Independent FK oracle: accumulate link vectors as complex exponentials.
std::vector<Vec2> fk_oracle(const std::vector<double>& q, const RobotSpec& robot) {
  std::vector<Vec2> pts;
  std::complex<double> z{robot.base.x, robot.base.y};
  std::complex<double> rot{1.0, 0.0};
  pts.push_back({z.real(), z.imag()});
  for (int i = 0; i < robot.joints; ++i) {
    rot *= std::exp(std::complex<double>(0.0, q[static_cast<size_t>(i)]));
    z += robot.link_lengths[static_cast<size_t>(i)] * rot;
    pts.push_back({z.real(), z.imag()});
  }
  return pts;
}

// Dense-sampling oracle for signed segment/circle clearance.
double dense_segment_circle(Segment s, Vec2 c, double r, int samples = 10000) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= samples; ++i) {
    const double t = static_cast<double>(i) / samples;
    best = std::min(best, (s.a + (s.b - s.a) * t - c).norm());
  }
  return best - r;
}

// Rasterization oracle: sample link center-lines at 1 mm and test point-in-
// inflated-disc / point-point proximity for nonadjacent links.
bool raster_in_collision(const std::vector<double>& q, const std::vector<Disc>& discs,
                         const RobotSpec& robot, double step = 1e-3) {
  const auto segs = forward_kinematics(JointConfig(q), robot);
  std::vector<std::vector<Vec2>> pts(segs.size());
  for (size_t i = 0; i < segs.size(); ++i) {
    const double len = (segs[i].b - segs[i].a).norm();
    const int n = std::max(1, static_cast<int>(std::ceil(len / step)));
    for (int k = 0; k <= n; ++k)
      pts[i].push_back(segs[i].a + (segs[i].b - segs[i].a) * (static_cast<double>(k) / n));
  }
  for (const auto& link : pts)
    for (const Vec2& p : link)
      for (const Disc& d : discs)
        if ((p - d.center).norm() <= d.radius + robot.link_radius) return true;
  for (size_t i = 0; i < pts.size(); ++i)
    for (size_t j = i + 2; j < pts.size(); ++j)
      for (const Vec2& a : pts[i])
        for (const Vec2& b : pts[j])
          if ((a - b).norm() <= 2.0 * robot.link_radius) return true;
  return false;
}

Trajectory constant_trajectory(const std::vector<double>& q, int K, double dt) {
  Trajectory t(K, static_cast<int>(q.size()), dt);
  for (int k = 0; k < K; ++k) t.set_row(k, q);
  return t;
}

}  // namespace

TEST_CASE("zero configuration lies straight along +x", "[arm]") {
  const auto segs = forward_kinematics(JointConfig({0, 0, 0}), kRobot);
  REQUIRE(segs.size() == 3);
  CHECK_THAT(segs[2].b.x, Catch::Matchers::WithinAbs(0.9, 1e-12));
  CHECK_THAT(segs[2].b.y, Catch::Matchers::WithinAbs(0.0, 1e-12));
  for (const auto& s : segs) {
    CHECK_THAT(s.a.y, Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(s.b.y, Catch::Matchers::WithinAbs(0.0, 1e-12));
  }
}

TEST_CASE("first joint at pi/2 points the whole arm along +y", "[arm]") {
  const auto segs = forward_kinematics(JointConfig({kPi / 2, 0, 0}), kRobot);
  CHECK_THAT(segs[2].b.x, Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_THAT(segs[2].b.y, Catch::Matchers::WithinAbs(0.9, 1e-12));
}

TEST_CASE("random configurations match the complex-exponential oracle", "[arm]") {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const auto q = random_config(rng);
    const auto segs = forward_kinematics(JointConfig(q), kRobot);
    const auto want = fk_oracle(q, kRobot);
    for (int i = 0; i < 3; ++i) {
      CHECK_THAT(segs[static_cast<size_t>(i)].b.x, Catch::Matchers::WithinAbs(want[static_cast<size_t>(i) + 1].x, 1e-9));
      CHECK_THAT(segs[static_cast<size_t>(i)].b.y, Catch::Matchers::WithinAbs(want[static_cast<size_t>(i) + 1].y, 1e-9));
    }
  }
}

TEST_CASE("adding delta to joint 0 rotates all points about the base", "[arm]") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_config(rng);
    const double delta = rng.uniform(-1.0, 1.0);
    const auto before = joint_positions(q, kRobot);
    q[0] += delta;
    const auto after = joint_positions(q, kRobot);
    const double c = std::cos(delta), s = std::sin(delta);
    for (size_t i = 0; i < before.size(); ++i) {
      const Vec2 rel = before[i] - kRobot.base;
      const Vec2 want = kRobot.base + Vec2{c * rel.x - s * rel.y, s * rel.x + c * rel.y};
      CHECK_THAT(after[i].x, Catch::Matchers::WithinAbs(want.x, 1e-9));
      CHECK_THAT(after[i].y, Catch::Matchers::WithinAbs(want.y, 1e-9));
    }
  }
}

TEST_CASE("segment-circle distance: perpendicular and center-on-segment cases", "[arm]") {
  CHECK_THAT(segment_circle_distance({{0, 0}, {1, 0}}, {0.5, 1.0}, 0.5),
             Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THAT(segment_circle_distance({{0, 0}, {1, 0}}, {0.3, 0.0}, 0.1),
             Catch::Matchers::WithinAbs(-0.1, 1e-12));
  // Zero-length segment degrades to a point.
  CHECK_THAT(segment_circle_distance({{1, 1}, {1, 1}}, {1, 3}, 0.5),
             Catch::Matchers::WithinAbs(1.5, 1e-12));
}

TEST_CASE("segment-circle distance matches the dense-sampling oracle", "[arm]") {
  Rng rng(55);
  for (int trial = 0; trial < 1000; ++trial) {
    const Segment s{{rng.uniform(-1, 1), rng.uniform(-1, 1)}, {rng.uniform(-1, 1), rng.uniform(-1, 1)}};
    const Vec2 c{rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    const double r = rng.uniform(0.01, 0.5);
    const double got = segment_circle_distance(s, c, r);
    const double want = dense_segment_circle(s, c, r);
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-4));
  }
}

TEST_CASE("segment-circle distance is symmetric under endpoint swap", "[arm]") {
  Rng rng(56);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec2 a{rng.uniform(-1, 1), rng.uniform(-1, 1)}, b{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Vec2 c{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double r = rng.uniform(0.01, 0.3);
    CHECK_THAT(segment_circle_distance({a, b}, c, r),
               Catch::Matchers::WithinAbs(segment_circle_distance({b, a}, c, r), 1e-12));
  }
}

TEST_CASE("straight arm with no obstacles has large positive self-clearance", "[arm]") {
  const double c = config_clearance(std::vector<double>{0, 0, 0}, {}, kRobot);
  // Nonadjacent links 0 and 2 are separated by link 1 (0.3 m) minus two radii.
  CHECK_THAT(c, Catch::Matchers::WithinAbs(0.3 - 0.06, 1e-9));
}

TEST_CASE("disc centered on a link midpoint collides by at least the link radius", "[arm]") {
  const auto segs = forward_kinematics(JointConfig({0.3, -0.5, 0.2}), kRobot);
  const Vec2 mid = segs[1].a + (segs[1].b - segs[1].a) * 0.5;
  const double c = config_clearance(std::vector<double>{0.3, -0.5, 0.2}, {{mid, 0.05}}, kRobot);
  CHECK(c <= -kRobot.link_radius);
}

TEST_CASE("clearance sign agrees with the rasterization oracle", "[arm]") {
  Rng rng(77);
  int done = 0;
  while (done < 1000) {
    const auto q = random_config(rng);
    std::vector<Disc> discs;
    const int n = rng.uniform_int(0, 3);
    for (int i = 0; i < n; ++i) {
      const double ang = rng.uniform(0, 2 * kPi);
      const double rad = rng.uniform(0.1, 0.9);
      discs.push_back({{rad * std::cos(ang), rad * std::sin(ang)}, rng.uniform(0.03, 0.15)});
    }
    const double c = config_clearance(q, discs, kRobot);
    // Skip knife-edge cases below the oracle's 1 mm resolution.
    if (std::abs(c) < 2e-3) continue;
    REQUIRE((c <= 0.0) == raster_in_collision(q, discs, kRobot));
    ++done;
  }
}

TEST_CASE("constant trajectory at a collision-free start equals goal is feasible", "[arm]") {
  const std::vector<double> q{0.5, -0.3, 0.8};
  const Trajectory traj = constant_trajectory(q, 8, 0.1);
  const auto rep = check_feasibility(traj, {}, Limits::defaults(3), JointConfig(q), 0.1, kRobot);
  CHECK(rep.feasible());
  CHECK(rep.goal_error == 0.0);
  CHECK_FALSE(rep.first_violation.has_value());
}

TEST_CASE("waypoint inside a disc fails the collision check with an index", "[arm]") {
  const std::vector<double> q{0.0, 0.0, 0.0};
  Trajectory traj = constant_trajectory(q, 5, 0.1);
  // Midpoint waypoint bends the arm into a disc sitting on the tip position.
  traj.set_row(2, {0.2, 0.0, 0.0});
  const auto tip = joint_positions(traj.row(2), kRobot).back();
  const auto rep =
      check_feasibility(traj, {{{tip.x, tip.y}, 0.05}}, Limits::defaults(3), JointConfig(q), 10.0, kRobot);
  CHECK_FALSE(rep.collision_free);
  REQUIRE(rep.first_violation.has_value());
  CHECK(*rep.first_violation <= 2);
}

TEST_CASE("velocity limit boundary: exact is within limits, 1% over is not", "[arm]") {
  Limits lim = Limits::defaults(3);
  const double dt = 0.1;
  const double dq = lim.vel_hi[0] * dt;  // exactly at the limit

  Trajectory ok(2, 3, dt);
  ok.set_row(0, {0, 0, 0});
  ok.set_row(1, {dq, 0, 0});
  // Keep accel/jerk trivially fine: only two waypoints, so only velocity applies.
  auto rep = check_feasibility(ok, {}, lim, JointConfig(ok.row(1)), 1.0, kRobot);
  CHECK(rep.within_limits);

  Trajectory over(2, 3, dt);
  over.set_row(0, {0, 0, 0});
  over.set_row(1, {dq * 1.01, 0, 0});
  rep = check_feasibility(over, {}, lim, JointConfig(over.row(1)), 1.0, kRobot);
  CHECK_FALSE(rep.within_limits);
}

TEST_CASE("more substeps on a nested grid is never more permissive", "[arm]") {
  // Grids nest when (s'+1) is a multiple of (s+1): 1 vs 3 and 4 vs 9.
  Rng rng(42);
  const Limits lim = Limits::defaults(3);
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Disc> discs;
    for (int i = 0; i < 2; ++i) {
      const double ang = rng.uniform(0, 2 * kPi);
      const double rad = rng.uniform(0.2, 0.8);
      discs.push_back({{rad * std::cos(ang), rad * std::sin(ang)}, rng.uniform(0.05, 0.12)});
    }
    Trajectory traj(6, 3, 0.1);
    traj.set_row(0, random_config(rng));
    for (int k = 1; k < 6; ++k) {
      auto prev = traj.row(k - 1);
      for (auto& a : prev) a += rng.uniform(-0.4, 0.4);
      traj.set_row(k, prev);
    }
    const JointConfig goal(traj.row(5));
    for (const auto [coarse, fine] : {std::pair{1, 3}, std::pair{4, 9}}) {
      const auto lo = check_feasibility(traj, discs, lim, goal, 10.0, kRobot, coarse);
      const auto hi = check_feasibility(traj, discs, lim, goal, 10.0, kRobot, fine);
      if (!lo.collision_free) {
        REQUIRE_FALSE(hi.collision_free);
        ++checked;
      }
    }
  }
  CHECK(checked > 20);  // the scene generator above must actually produce collisions
}

TEST_CASE("joint config wraps angles to (-pi, pi] on construction", "[arm]") {
  const JointConfig q({3.5 * kPi, -kPi, kPi});
  CHECK_THAT(q[0], Catch::Matchers::WithinAbs(-0.5 * kPi, 1e-12));
  CHECK_THAT(q[1], Catch::Matchers::WithinAbs(kPi, 1e-12));  // -pi wraps to +pi
  CHECK_THAT(q[2], Catch::Matchers::WithinAbs(kPi, 1e-12));
  CHECK_THROWS_AS(JointConfig({std::nan("")}), InputError);
}

TEST_CASE("trajectory construction validates shape", "[arm]") {
  CHECK_THROWS_AS(Trajectory(1, 3, 0.1), InputError);
  CHECK_THROWS_AS(Trajectory(4, 3, 0.0), InputError);
}
