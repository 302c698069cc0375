// Trajectory optimization: smooth penalty objective with analytic gradients,
// particle-based warm-up, L-BFGS refinement, and a deterministic batched
// solver. The optimizer only ever sees the EstimatedWorld.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "flowplan/arm.hpp"
#include "flowplan/common.hpp"
#include "flowplan/parallel.hpp"
#include "flowplan/rng.hpp"
#include "flowplan/scene.hpp"

namespace flowplan {

struct CostWeights {
  double w_goal = 50.0;
  double w_smooth = 1.0;
  double w_collision = 200.0;
  double w_limits = 100.0;
  double margin = 0.02;  // meters of extra clearance demanded by the penalty

  void validate() const {
    if (w_goal < 0 || w_smooth < 0 || w_collision < 0 || w_limits < 0 || margin < 0)
      throw InputError("CostWeights: weights must be nonnegative");
  }
};

struct OptProblem {
  std::vector<double> start, goal;  // J radians each
  EstimatedWorld world;
  RobotSpec robot;
  Limits limits;
  CostWeights weights;
  int traj_len = 32;  // K
  double dt = 0.1;
};

struct CostBreakdown {
  double goal = 0.0, smooth = 0.0, collision = 0.0, limits = 0.0;
  double total() const { return goal + smooth + collision + limits; }
};

struct SolveResult {
  Trajectory trajectory;
  double final_cost = 0.0;
  CostBreakdown breakdown;
  int iterations = 0;
  bool converged = false;
  double wall_time_s = 0.0;
  std::vector<double> cost_trace;  // cost at the seed and after every accepted iterate
  std::string error;               // empty on success

  bool ok() const { return error.empty(); }
};

// ---- seeds ---------------------------------------------------------------------

// Straight-line seed using the shortest angular difference per joint; the
// final row may therefore be the goal shifted by 2*pi.
inline Trajectory linear_seed(const std::vector<double>& start, const std::vector<double>& goal,
                              int K, double dt) {
  if (K < 2) throw InputError("linear_seed: need at least 2 waypoints");
  const int J = static_cast<int>(start.size());
  Trajectory traj(K, J, dt);
  for (int j = 0; j < J; ++j) {
    const double delta = wrap_angle(goal[static_cast<size_t>(j)] - start[static_cast<size_t>(j)]);
    for (int k = 0; k < K; ++k)
      traj.at(k, j) = start[static_cast<size_t>(j)] + delta * static_cast<double>(k) / (K - 1);
  }
  traj.set_row(0, start);
  return traj;
}

// ---- objective -----------------------------------------------------------------

namespace detail {
// d(pivot_{p})/d(theta_j) = perp(pivot_p - pivot_j) for j < p, else 0.
inline Vec2 pivot_jacobian(const std::vector<Vec2>& pivots, int point_index, int joint) {
  if (joint >= point_index) return {0.0, 0.0};
  return (pivots[static_cast<size_t>(point_index)] - pivots[static_cast<size_t>(joint)]).perp();
}
}  // namespace detail

// Cost and (optionally) its analytic gradient. Row 0 contributes to the
// gradient like any other row; the solvers freeze it.
inline CostBreakdown total_cost(const Trajectory& traj, const OptProblem& prob,
                                std::vector<double>* grad_out = nullptr) {
  const int K = traj.steps, J = traj.joints;
  const double dt = traj.dt;
  const CostWeights& w = prob.weights;
  CostBreakdown parts;
  if (grad_out) grad_out->assign(static_cast<size_t>(K) * J, 0.0);
  auto grad_at = [&](int k, int j) -> double& { return (*grad_out)[static_cast<size_t>(k) * J + j]; };

  // Goal: w_g * |theta_{K-1} - theta_g|^2
  for (int j = 0; j < J; ++j) {
    const double d = traj.at(K - 1, j) - prob.goal[static_cast<size_t>(j)];
    parts.goal += w.w_goal * d * d;
    if (grad_out) grad_at(K - 1, j) += 2.0 * w.w_goal * d;
  }

  // Smoothness: w_s * dt * sum_k |(theta_{k+1} - 2 theta_k + theta_{k-1}) / dt^2|^2
  const double inv_dt2 = 1.0 / (dt * dt);
  for (int k = 1; k + 1 < K; ++k)
    for (int j = 0; j < J; ++j) {
      const double a = (traj.at(k + 1, j) - 2.0 * traj.at(k, j) + traj.at(k - 1, j)) * inv_dt2;
      parts.smooth += w.w_smooth * dt * a * a;
      if (grad_out) {
        const double c = 2.0 * w.w_smooth * dt * a * inv_dt2;
        grad_at(k - 1, j) += c;
        grad_at(k, j) -= 2.0 * c;
        grad_at(k + 1, j) += c;
      }
    }

  // Collision: hinge^2 on (margin - clearance) per waypoint, link x disc pair
  // and nonadjacent link pair.
  if (w.w_collision > 0.0) {
    std::vector<Vec2> pivots;
    for (int k = 0; k < K; ++k) {
      const auto row = traj.row(k);
      pivots = joint_positions(row, prob.robot);
      for (int i = 0; i < J; ++i) {
        const Segment seg{pivots[static_cast<size_t>(i)], pivots[static_cast<size_t>(i) + 1]};
        for (const Disc& d : prob.world.discs) {
          const double t = segment_param(seg, d.center);
          const Vec2 foot = seg.a + (seg.b - seg.a) * t;
          const double dist = (foot - d.center).norm();
          const double clearance = dist - d.radius - prob.robot.link_radius;
          const double h = w.margin - clearance;
          if (h <= 0.0) continue;
          parts.collision += w.w_collision * h * h;
          if (!grad_out || dist < 1e-12) continue;
          const Vec2 n = (foot - d.center) * (1.0 / dist);
          const double coef = -2.0 * w.w_collision * h;  // d(cost)/d(dist)
          for (int j = 0; j <= i && j < J; ++j) {
            const Vec2 da = detail::pivot_jacobian(pivots, i, j);
            const Vec2 db = detail::pivot_jacobian(pivots, i + 1, j);
            grad_at(k, j) += coef * n.dot(da * (1.0 - t) + db * t);
          }
        }
        for (int i2 = i + 2; i2 < J; ++i2) {
          const Segment other{pivots[static_cast<size_t>(i2)], pivots[static_cast<size_t>(i2) + 1]};
          double s, t;
          const double dist = std::sqrt(closest_segment_segment(seg, other, s, t));
          const double clearance = dist - 2.0 * prob.robot.link_radius;
          const double h = w.margin - clearance;
          if (h <= 0.0) continue;
          parts.collision += w.w_collision * h * h;
          if (!grad_out || dist < 1e-12) continue;
          const Vec2 p1 = seg.a + (seg.b - seg.a) * s;
          const Vec2 p2 = other.a + (other.b - other.a) * t;
          const Vec2 n = (p1 - p2) * (1.0 / dist);
          const double coef = -2.0 * w.w_collision * h;
          for (int j = 0; j < J; ++j) {
            const Vec2 dp1 = detail::pivot_jacobian(pivots, i, j) * (1.0 - s) +
                             detail::pivot_jacobian(pivots, i + 1, j) * s;
            const Vec2 dp2 = detail::pivot_jacobian(pivots, i2, j) * (1.0 - t) +
                             detail::pivot_jacobian(pivots, i2 + 1, j) * t;
            grad_at(k, j) += coef * n.dot(dp1 - dp2);
          }
        }
      }
    }
  }

  // Limit penalties: hinge^2 on one-sided divided differences, same stencils
  // as the feasibility check.
  if (w.w_limits > 0.0) {
    const Limits& lim = prob.limits;
    auto hinge = [&](double value, double lo, double hi, auto&& add_grad) {
      if (value > hi) {
        const double h = value - hi;
        parts.limits += w.w_limits * h * h;
        if (grad_out) add_grad(2.0 * w.w_limits * h);
      } else if (value < lo) {
        const double h = value - lo;  // negative
        parts.limits += w.w_limits * h * h;
        if (grad_out) add_grad(2.0 * w.w_limits * h);
      }
    };
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < J; ++j)
        hinge(traj.at(k, j), lim.pos_lo[static_cast<size_t>(j)], lim.pos_hi[static_cast<size_t>(j)],
              [&](double g) { grad_at(k, j) += g; });
    const double c1 = 1.0 / dt, c2 = inv_dt2, c3 = inv_dt2 / dt;
    for (int k = 0; k + 1 < K; ++k)
      for (int j = 0; j < J; ++j) {
        const double v = (traj.at(k + 1, j) - traj.at(k, j)) * c1;
        hinge(v, lim.vel_lo[static_cast<size_t>(j)], lim.vel_hi[static_cast<size_t>(j)], [&](double g) {
          grad_at(k, j) -= g * c1;
          grad_at(k + 1, j) += g * c1;
        });
      }
    for (int k = 0; k + 2 < K; ++k)
      for (int j = 0; j < J; ++j) {
        const double a = (traj.at(k + 2, j) - 2.0 * traj.at(k + 1, j) + traj.at(k, j)) * c2;
        hinge(a, lim.acc_lo[static_cast<size_t>(j)], lim.acc_hi[static_cast<size_t>(j)], [&](double g) {
          grad_at(k, j) += g * c2;
          grad_at(k + 1, j) -= 2.0 * g * c2;
          grad_at(k + 2, j) += g * c2;
        });
      }
    for (int k = 0; k + 3 < K; ++k)
      for (int j = 0; j < J; ++j) {
        const double jk =
            (traj.at(k + 3, j) - 3.0 * traj.at(k + 2, j) + 3.0 * traj.at(k + 1, j) - traj.at(k, j)) * c3;
        hinge(jk, lim.jerk_lo[static_cast<size_t>(j)], lim.jerk_hi[static_cast<size_t>(j)], [&](double g) {
          grad_at(k, j) -= g * c3;
          grad_at(k + 1, j) += 3.0 * g * c3;
          grad_at(k + 2, j) -= 3.0 * g * c3;
          grad_at(k + 3, j) += g * c3;
        });
      }
  }

  const char* bad = nullptr;
  if (!std::isfinite(parts.goal)) bad = "goal";
  else if (!std::isfinite(parts.smooth)) bad = "smooth";
  else if (!std::isfinite(parts.collision)) bad = "collision";
  else if (!std::isfinite(parts.limits)) bad = "limits";
  if (bad) throw NumericalError(std::string("total_cost: non-finite ") + bad + " term");
  return parts;
}

// ---- particle warm-up ------------------------------------------------------------

// One MPPI-style sweep with elitism: smooth perturbations, softmin-weighted
// mean, and a final argmin over {input, particles, mean}. Cost never goes up.
inline Trajectory particle_warmup(const Trajectory& seed, const OptProblem& prob, int iterations,
                                  int particles, double noise_scale, double temperature, Rng& rng) {
  if (iterations <= 0 || particles <= 0 || noise_scale == 0.0) return seed;
  const int K = seed.steps, J = seed.joints;
  // 5-tap triangular window over time, unit mass.
  const double win[5] = {1.0 / 9, 2.0 / 9, 3.0 / 9, 2.0 / 9, 1.0 / 9};

  Trajectory cur = seed;
  double cur_cost = total_cost(cur, prob).total();
  std::vector<double> white(static_cast<size_t>(K) * J);
  for (int it = 0; it < iterations; ++it) {
    std::vector<Trajectory> cands;
    std::vector<double> costs;
    cands.reserve(static_cast<size_t>(particles));
    for (int p = 0; p < particles; ++p) {
      for (auto& x : white) x = rng.normal();
      Trajectory cand = cur;
      for (int k = 1; k < K; ++k)
        for (int j = 0; j < J; ++j) {
          double acc = 0.0;
          for (int o = -2; o <= 2; ++o) {
            const int kk = k + o;
            if (kk < 0 || kk >= K) continue;
            acc += win[o + 2] * white[static_cast<size_t>(kk) * J + j];
          }
          cand.at(k, j) += noise_scale * acc;
        }
      costs.push_back(total_cost(cand, prob).total());
      cands.push_back(std::move(cand));
    }
    const double cmin = *std::min_element(costs.begin(), costs.end());
    double wsum = 0.0;
    std::vector<double> wts(costs.size());
    for (size_t p = 0; p < costs.size(); ++p) {
      wts[p] = std::exp(-(costs[p] - cmin) / temperature);
      wsum += wts[p];
    }
    Trajectory mean = cur;
    for (int k = 1; k < K; ++k)
      for (int j = 0; j < J; ++j) {
        double acc = 0.0;
        for (size_t p = 0; p < cands.size(); ++p) acc += wts[p] * cands[p].at(k, j);
        mean.at(k, j) = acc / wsum;
      }
    const double mean_cost = total_cost(mean, prob).total();

    int best = -1;  // -1 = keep current
    double best_cost = cur_cost;
    for (size_t p = 0; p < costs.size(); ++p)
      if (costs[p] < best_cost) {
        best_cost = costs[p];
        best = static_cast<int>(p);
      }
    if (mean_cost < best_cost) {
      best_cost = mean_cost;
      cur = std::move(mean);
    } else if (best >= 0) {
      cur = std::move(cands[static_cast<size_t>(best)]);
    }
    cur_cost = best_cost;
  }
  return cur;
}

// ---- L-BFGS ---------------------------------------------------------------------

// Two-loop recursion over the free rows 1..K-1 with Armijo backtracking
// (c = 1e-4, halving, at most 20 halvings). Accepted iterates strictly
// decrease the cost. Non-finite costs abort with the best point so far.
inline SolveResult lbfgs_refine(const Trajectory& seed, const OptProblem& prob, int max_iterations,
                                int memory = 10, double tolerance = 1e-6) {
  if (memory < 1) throw InputError("lbfgs_refine: memory must be >= 1");
  const auto t_start = std::chrono::steady_clock::now();
  const int K = seed.steps, J = seed.joints;
  const int n = (K - 1) * J;

  Trajectory work = seed;
  work.set_row(0, prob.start);

  auto pack = [&](const Trajectory& t, std::vector<double>& x) {
    for (int k = 1; k < K; ++k)
      for (int j = 0; j < J; ++j) x[static_cast<size_t>((k - 1) * J + j)] = t.at(k, j);
  };
  auto unpack = [&](const std::vector<double>& x, Trajectory& t) {
    for (int k = 1; k < K; ++k)
      for (int j = 0; j < J; ++j) t.at(k, j) = x[static_cast<size_t>((k - 1) * J + j)];
  };

  SolveResult res;
  res.trajectory = work;

  std::vector<double> x(static_cast<size_t>(n)), g(static_cast<size_t>(n));
  std::vector<double> full_grad;
  pack(work, x);
  auto eval = [&](const std::vector<double>& xv, std::vector<double>* gv) {
    unpack(xv, work);
    const CostBreakdown parts = total_cost(work, prob, gv ? &full_grad : nullptr);
    if (gv)
      for (int k = 1; k < K; ++k)
        for (int j = 0; j < J; ++j)
          (*gv)[static_cast<size_t>((k - 1) * J + j)] = full_grad[static_cast<size_t>(k) * J + j];
    return parts;
  };

  CostBreakdown parts;
  try {
    parts = eval(x, &g);
  } catch (const NumericalError& e) {
    res.error = e.what();
    res.final_cost = std::numeric_limits<double>::infinity();
    return res;
  }
  double f = parts.total();
  res.final_cost = f;
  res.breakdown = parts;
  res.cost_trace.push_back(f);
  unpack(x, res.trajectory);

  std::vector<std::vector<double>> s_hist, y_hist;
  std::vector<double> rho_hist;
  std::vector<double> d(static_cast<size_t>(n)), x_new(static_cast<size_t>(n)),
      g_new(static_cast<size_t>(n));

  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
  };

  for (int it = 0; it < max_iterations; ++it) {
    const double gnorm = std::sqrt(dot(g, g));
    if (gnorm < tolerance) {
      res.converged = true;
      break;
    }
    // Two-loop recursion.
    d = g;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      alpha[static_cast<size_t>(i)] = rho_hist[static_cast<size_t>(i)] * dot(s_hist[static_cast<size_t>(i)], d);
      for (size_t m = 0; m < d.size(); ++m)
        d[m] -= alpha[static_cast<size_t>(i)] * y_hist[static_cast<size_t>(i)][m];
    }
    if (!s_hist.empty()) {
      const auto& sl = s_hist.back();
      const auto& yl = y_hist.back();
      const double gamma = dot(sl, yl) / dot(yl, yl);
      for (auto& v : d) v *= gamma;
    }
    for (size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * dot(y_hist[i], d);
      for (size_t m = 0; m < d.size(); ++m) d[m] += s_hist[i][m] * (alpha[i] - beta);
    }
    for (auto& v : d) v = -v;
    double dg = dot(d, g);
    if (!(dg < 0.0)) {  // not a descent direction: fall back to steepest descent
      for (size_t m = 0; m < d.size(); ++m) d[m] = -g[m];
      dg = -dot(g, g);
    }

    // Armijo backtracking. The first iteration has no curvature information,
    // so its unit step is taken along the normalized direction.
    constexpr double c1 = 1e-4;
    double step = 1.0;
    if (s_hist.empty()) {
      const double dnorm = std::sqrt(dot(d, d));
      if (dnorm > 1.0) step = 1.0 / dnorm;
    }
    bool accepted = false;
    CostBreakdown parts_new;
    double f_new = f;
    for (int half = 0; half <= 20; ++half) {
      for (size_t m = 0; m < x.size(); ++m) x_new[m] = x[m] + step * d[m];
      bool numerical_abort = false;
      try {
        parts_new = eval(x_new, &g_new);
        f_new = parts_new.total();
      } catch (const NumericalError&) {
        numerical_abort = true;
      }
      if (numerical_abort) {
        res.converged = false;
        res.iterations = it;
        res.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        return res;  // best-so-far already stored
      }
      if (f_new <= f + c1 * step * dg && f_new < f) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      res.iterations = it;
      break;  // line-search failure terminates
    }

    std::vector<double> s_vec(static_cast<size_t>(n)), y_vec(static_cast<size_t>(n));
    for (size_t m = 0; m < x.size(); ++m) {
      s_vec[m] = x_new[m] - x[m];
      y_vec[m] = g_new[m] - g[m];
    }
    const double sy = dot(s_vec, y_vec);
    if (sy > 1e-12) {
      if (static_cast<int>(s_hist.size()) == memory) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
      s_hist.push_back(std::move(s_vec));
      y_hist.push_back(std::move(y_vec));
      rho_hist.push_back(1.0 / sy);
    }
    x.swap(x_new);
    g.swap(g_new);
    f = f_new;
    parts = parts_new;
    res.iterations = it + 1;
    res.final_cost = f;
    res.breakdown = parts;
    res.cost_trace.push_back(f);
    unpack(x, res.trajectory);
  }
  res.trajectory.set_row(0, prob.start);
  res.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

// ---- batched solve -----------------------------------------------------------------

struct BatchOptions {
  int warmup_iterations = 4;
  int warmup_particles = 32;
  // 0.02 rad: large enough to nudge colliding seeds into better basins,
  // small enough that the smoothness penalty of the noise itself does not
  // swamp the collision savings (larger scales never win the elitism test).
  double warmup_noise = 0.02;
  double warmup_temperature = 0.5;
  int lbfgs_memory = 10;
  double lbfgs_tolerance = 1e-6;
  int workers = 1;
};

namespace detail {
// Content hash of the waypoint matrix. Streams keyed on it (plus an
// occurrence index for duplicates) make batch results invariant to input
// order while still giving identical seeds distinct warm-up noise.
inline uint64_t trajectory_key(const Trajectory& t) {
  uint64_t h = 0x243f6a8885a308d3ull ^ (static_cast<uint64_t>(t.steps) << 32 | static_cast<uint64_t>(t.joints));
  for (double v : t.q) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    h = flowplan::detail::mix(h, bits);
  }
  return h;
}
}  // namespace detail

// Solves each seed independently: warm-up then refinement, on an rng stream
// derived from (batch key, seed content, duplicate index). Output order
// matches input order and is bit-identical for any worker count. Per-seed
// failures fill that slot's error field; the batch always completes.
inline std::vector<SolveResult> solve_batch(const std::vector<Trajectory>& seeds,
                                            const OptProblem& prob, int iteration_budget, Rng& rng,
                                            const BatchOptions& opt = {}) {
  if (seeds.empty()) throw InputError("solve_batch: need at least one seed");
  const uint64_t batch_key = rng.next_u64();
  std::vector<uint64_t> stream_keys(seeds.size());
  {
    std::vector<uint64_t> hashes(seeds.size());
    for (size_t i = 0; i < seeds.size(); ++i) hashes[i] = detail::trajectory_key(seeds[i]);
    for (size_t i = 0; i < seeds.size(); ++i) {
      uint64_t occurrence = 0;
      for (size_t j = 0; j < i; ++j)
        if (hashes[j] == hashes[i]) ++occurrence;
      stream_keys[i] = flowplan::detail::mix(hashes[i], occurrence);
    }
  }
  std::vector<SolveResult> results(seeds.size());
  parallel_for(static_cast<int>(seeds.size()), opt.workers, [&](int i) {
    const auto t0 = std::chrono::steady_clock::now();
    SolveResult& out = results[static_cast<size_t>(i)];
    try {
      Rng stream = Rng::stream(batch_key, stream_keys[static_cast<size_t>(i)]);
      Trajectory seed = seeds[static_cast<size_t>(i)];
      seed.set_row(0, prob.start);
      const Trajectory warm = particle_warmup(seed, prob, opt.warmup_iterations, opt.warmup_particles,
                                              opt.warmup_noise, opt.warmup_temperature, stream);
      out = lbfgs_refine(warm, prob, iteration_budget, opt.lbfgs_memory, opt.lbfgs_tolerance);
    } catch (const Error& e) {
      out.error = e.what();
      out.final_cost = std::numeric_limits<double>::infinity();
      out.trajectory = seeds[static_cast<size_t>(i)];
      out.trajectory.set_row(0, prob.start);
    }
    out.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });
  return results;
}

}  // namespace flowplan
