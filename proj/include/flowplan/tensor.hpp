// Dense row-major float32 tensor. Values are stored in 32 bits; reductions
// elsewhere accumulate in 64 bits.
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "flowplan/common.hpp"

namespace flowplan {

struct Tensor {
  std::vector<int> shape;
  std::vector<float> v;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<float> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int64_t>(v.size()) != count(shape))
      throw ShapeError("Tensor: value count does not match shape");
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw ShapeError("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.v.assign(static_cast<size_t>(count(t.shape)), 0.0f);
    return t;
  }

  static Tensor full(std::vector<int> s, float value) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.v) x = value;
    return t;
  }

  static Tensor row(std::initializer_list<float> data) {
    Tensor t;
    t.shape = {1, static_cast<int>(data.size())};
    t.v.assign(data);
    return t;
  }

  int64_t size() const { return static_cast<int64_t>(v.size()); }
  bool empty() const { return v.empty(); }

  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const {
    if (ndim() != 2) throw ShapeError("Tensor::rows: not 2-D");
    return shape[0];
  }
  int cols() const {
    if (ndim() != 2) throw ShapeError("Tensor::cols: not 2-D");
    return shape[1];
  }

  float& at(int i, int j) { return v[static_cast<size_t>(i) * cols() + j]; }
  float at(int i, int j) const { return v[static_cast<size_t>(i) * cols() + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (float x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace flowplan
