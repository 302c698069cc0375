// Named parameter tensors with matching gradients and Adam state.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowplan/common.hpp"
#include "flowplan/tensor.hpp"

namespace flowplan {

class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
    Tensor m;  // Adam first moment
    Tensor s;  // Adam second moment
  };

  Tensor& create(const std::string& name, Tensor init) {
    if (entries_.count(name)) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
    Entry e;
    e.grad = Tensor::zeros(init.shape);
    e.m = Tensor::zeros(init.shape);
    e.s = Tensor::zeros(init.shape);
    e.value = std::move(init);
    return entries_.emplace(name, std::move(e)).first->second.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor& value(const std::string& name) const { return find(name).value; }
  Tensor& mutable_value(const std::string& name) { return find(name).value; }
  Tensor& grad(const std::string& name) { return find(name).grad; }
  const Tensor& grad(const std::string& name) const { return find(name).grad; }

  // Names in sorted order; all iteration (Adam, checkpoints, gradient merges)
  // follows this order so results do not depend on registration order.
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  size_t size() const { return entries_.size(); }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [k, e] : entries_) n += e.value.size();
    return n;
  }

  int64_t step() const { return step_; }

  void zero_grads() {
    for (auto& [k, e] : entries_)
      for (auto& g : e.grad.v) g = 0.0f;
  }

  // Adam update over all parameters. If any gradient is non-finite, nothing
  // is touched. Gradients are zeroed and the step counter advances on success.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    for (const auto& [name, e] : entries_)
      if (!e.grad.all_finite())
        throw NumericalError("adam_step: non-finite gradient in '" + name + "'");

    const int64_t t = step_ + 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, e] : entries_) {
      for (size_t i = 0; i < e.value.v.size(); ++i) {
        const double g = e.grad.v[i];
        const double m = beta1 * e.m.v[i] + (1.0 - beta1) * g;
        const double s = beta2 * e.s.v[i] + (1.0 - beta2) * g * g;
        e.m.v[i] = static_cast<float>(m);
        e.s.v[i] = static_cast<float>(s);
        const double mhat = m / bc1;
        const double shat = s / bc2;
        e.value.v[i] = static_cast<float>(e.value.v[i] - lr * mhat / (std::sqrt(shat) + eps));
        e.grad.v[i] = 0.0f;
      }
    }
    step_ = t;
  }

 private:
  Entry& find(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }
  const Entry& find(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
  int64_t step_ = 0;
};

// Standalone gradient accumulator with the same keys as a ParamStore. Batched
// training gives each sample its own sink and merges them in sample order, so
// results are identical for any worker count.
using GradMap = std::map<std::string, Tensor>;

inline void merge_grads(GradMap& dst, const GradMap& src) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      dst.emplace(name, g);
    } else {
      require_same_shape(it->second, g, "merge_grads");
      for (size_t i = 0; i < g.v.size(); ++i) it->second.v[i] += g.v[i];
    }
  }
}

inline void apply_grads(ParamStore& ps, const GradMap& grads, double scale = 1.0) {
  for (const auto& [name, g] : grads) {
    Tensor& dst = ps.grad(name);
    require_same_shape(dst, g, "apply_grads");
    for (size_t i = 0; i < g.v.size(); ++i)
      dst.v[i] += static_cast<float>(scale * static_cast<double>(g.v[i]));
  }
}

}  // namespace flowplan
