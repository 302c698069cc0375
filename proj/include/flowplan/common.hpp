// Shared error types and small utilities used across the library.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace flowplan {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor/op shape disagreement (names the offending op where possible).
struct ShapeError : Error {
  using Error::Error;
};

// Bad wiring: missing parameter, dimension not divisible by heads, etc.
struct ConfigError : Error {
  using Error::Error;
};

// API misuse, e.g. backward twice without a new forward.
struct StateError : Error {
  using Error::Error;
};

// NaN/Inf surfaced from numerics.
struct NumericalError : Error {
  using Error::Error;
};

// Caller-supplied value out of domain.
struct InputError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

constexpr double kPi = 3.14159265358979323846;

// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * kPi);  // (-pi, pi], with -pi possible
  if (w <= -kPi) w += 2.0 * kPi;
  return w;
}

struct Vec2 {
  double x = 0.0, y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::sqrt(x * x + y * y); }
  // 90-degree counterclockwise rotation; the planar revolute-joint Jacobian.
  Vec2 perp() const { return {-y, x}; }
};

inline Vec2 operator*(double s, Vec2 v) { return {s * v.x, s * v.y}; }

}  // namespace flowplan
